//! `pfs`: data generation, corruption, voxelization, training, evaluation and
//! diagnostics over a self-describing run directory.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pfs_core::PfsError;
use pfs_tensor::TensorError;

#[derive(Parser, Debug)]
#[command(name = "pfs", version, about = "Post-fusion BEV feature stabilizer toolkit")]
pub struct Cli {
    /// Run directory holding config, data, checkpoints, metrics and reports.
    #[arg(long, global = true, default_value = "runs/default")]
    pub run_dir: PathBuf,

    /// Worker threads for generation, corruption and evaluation.
    #[arg(long, global = true, default_value_t = 1)]
    pub workers: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic train/val containers and manifests.
    GenData(commands::GenDataArgs),
    /// Write a corrupted copy of a split plus a sidecar of derived seeds.
    Corrupt(commands::CorruptArgs),
    /// Dump density grids and reliability targets as flat binary files.
    Voxelize(commands::VoxelizeArgs),
    /// Pretrain the host detector on clean data.
    PretrainHost,
    /// Run one curriculum stage (resumes from the last epoch checkpoint).
    TrainPfs(commands::TrainArgs),
    /// Evaluate host-only and host+stabilizer on the corruption suite.
    Eval(commands::EvalArgs),
    /// A0-A3 ablation table.
    Ablate(commands::EvalArgs),
    /// Finite-difference check of every layer and the full stabilizer + loss.
    GradCheck(commands::GradCheckArgs),
    /// Stabilizer parameter counts, instantiated and closed-form.
    CountParams(commands::CountArgs),
}

/// 0 ok, 2 configuration, 3 missing or unreadable prerequisite, 4 numeric
/// abort, 1 anything else (an internal error).
pub fn exit_code(err: &PfsError) -> u8 {
    match err {
        e if e.is_config() => 2,
        PfsError::Generation(_) => 2,
        PfsError::Dependency(_) | PfsError::Format(_) | PfsError::Io(_) => 3,
        PfsError::Tensor(TensorError::Format(_) | TensorError::Io(_)) => 3,
        PfsError::Numeric(_) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
