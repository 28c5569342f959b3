//! Host pretraining, the three-stage stabilizer curriculum, evaluation and
//! ablation, plus the run-directory layout they share.

pub mod eval;
pub mod frame;
pub mod pipeline;
pub mod pretrain;
pub mod train;

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use pfs_tensor::{ParamStore, Scalar};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{PfsError, Result};

pub use eval::{ablation_matrix, evaluate, evaluate_many, format_table, AblationRow, Condition, EvalReport, ModelVariant};
pub use frame::{infer, prepare_frame, Frame, FrameContext, Inference, StabilizerRef};
pub use pretrain::{pretrain_host, PretrainRecord};
pub use train::{run_stage, train_step, StageOutcome, StepRecord};

/// File names inside a run directory.
#[derive(Clone, Debug)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunLayout { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn host(&self) -> PathBuf {
        self.root.join("host.ckpt")
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.jsonl")
    }

    pub fn stage_dir(&self, stage: u8) -> PathBuf {
        self.root.join(format!("stage{stage}"))
    }

    /// Final stabilizer parameters after a stage.
    pub fn stage_final(&self, stage: u8) -> PathBuf {
        self.root.join(format!("stage{stage}.ckpt"))
    }

    pub fn epoch_ckpt(&self, stage: u8, epoch: usize) -> PathBuf {
        self.stage_dir(stage).join(format!("epoch{epoch}.ckpt"))
    }

    pub fn epoch_opt(&self, stage: u8, epoch: usize) -> PathBuf {
        self.stage_dir(stage).join(format!("epoch{epoch}.opt.ckpt"))
    }
}

/// Load a checkpoint that a later step depends on.
pub fn load_required<T: Scalar>(path: &Path, what: &str) -> Result<ParamStore<T>> {
    if !path.exists() {
        return Err(PfsError::Dependency(format!("{what} checkpoint missing at {}", path.display())));
    }
    Ok(ParamStore::load(path)?)
}

/// SHA-256 over the checkpoint serialization; identical iff the stores are
/// bit-identical.
pub fn params_hash<T: Scalar>(p: &ParamStore<T>) -> String {
    let digest = Sha256::digest(p.to_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Append one JSON record per line.
pub fn append_jsonl<R: Serialize>(path: &Path, records: &[R]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    for r in records {
        let mut line = serde_json::to_vec(r)?;
        line.push(b'\n');
        f.write_all(&line)?;
    }
    Ok(())
}
