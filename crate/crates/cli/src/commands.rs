use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::Args;
use pfs_core::config::RunConfig;
use pfs_core::corruption::{corrupt_inputs, CorruptionKind, CorruptionSpec, SeverityTable};
use pfs_core::curriculum::pipeline::{bind_config, generate_dataset, load_config};
use pfs_core::curriculum::{
    ablation_matrix, append_jsonl, evaluate_many, format_table, load_required, pretrain_host, run_stage, Condition,
    ModelVariant, RunLayout,
};
use pfs_core::dataset::{encode_container, read_split, run_pool, Split};
use pfs_core::gradsuite::run_grad_suite;
use pfs_core::host::init_host;
use pfs_core::scene::SceneSample;
use pfs_core::seeding::rng_from;
use pfs_core::stabilizer::{analytic_counts, count_params, init_pfs, ActiveBlocks, ParamCounts};
use pfs_core::voxel::{density_grid, reliability_target, write_counts, write_targets};
use pfs_core::{PfsError, Result};
use pfs_tensor::ParamStore;
use rayon::prelude::*;
use serde::Serialize;

use crate::{Cli, Command};

#[derive(Args, Debug)]
pub struct ConfigArgs {
    /// TOML run configuration; defaults to the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Built-in preset: toy or host.
    #[arg(long, default_value = "toy")]
    pub preset: String,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| PfsError::Config(format!("config {} not readable: {e}", p.display())))?;
                RunConfig::from_toml(&text)
            }
            None => RunConfig::preset(&self.preset),
        }
    }
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub dataset_seed: Option<u64>,
    #[arg(long)]
    pub train: Option<usize>,
    #[arg(long)]
    pub val: Option<usize>,
    /// Overwrite an existing dataset.
    #[arg(long)]
    pub force: bool,
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
        }
    }
}

#[derive(Args, Debug)]
pub struct CorruptArgs {
    /// Corruption kind, e.g. low_light or beam_reduction.
    #[arg(long)]
    pub kind: String,
    #[arg(long)]
    pub level: u8,
    /// Defaults to the run configuration's global seed.
    #[arg(long)]
    pub global_seed: Option<u64>,
    /// Corrupt only the first N samples of the split.
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long, value_enum, default_value = "val")]
    pub split: SplitArg,
}

#[derive(Args, Debug)]
pub struct VoxelizeArgs {
    #[command(flatten)]
    pub corruption: CorruptArgs,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub stage: u8,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Defaults to the run configuration's global seed.
    #[arg(long)]
    pub global_seed: Option<u64>,
    /// Evaluate on the first N validation samples only.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Severity levels; defaults to the configured evaluation levels.
    #[arg(long, value_delimiter = ',')]
    pub levels: Vec<u8>,
}

#[derive(Args, Debug)]
pub struct GradCheckArgs {
    #[arg(long, default_value_t = 6)]
    pub cases: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct CountArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Print JSON instead of a table.
    #[arg(long)]
    pub json: bool,
}

pub fn run(cli: &Cli) -> Result<()> {
    if cli.workers == 0 {
        return Err(PfsError::Config("--workers must be at least 1".into()));
    }
    let layout = RunLayout::new(&cli.run_dir);
    let w = cli.workers;
    match &cli.command {
        Command::GenData(a) => gen_data(a, &layout, w),
        Command::Corrupt(a) => corrupt(a, &layout, w),
        Command::Voxelize(a) => voxelize(a, &layout, w),
        Command::PretrainHost => {
            let cfg = load_config(&layout)?;
            let (train, val) = read_data(&layout)?;
            let (_, records) = pretrain_host::<f32>(&cfg, &train, &val, &layout, w)?;
            for r in &records {
                println!("{}", serde_json::to_string(r)?);
            }
            Ok(())
        }
        Command::TrainPfs(a) => {
            let cfg = load_config(&layout)?;
            cfg.stage(a.stage)?;
            let train = read_split(&layout.data_dir(), Split::Train)?;
            let outcome = run_stage::<f32>(&cfg, a.stage, &train, &layout, w)?;
            println!("{}", serde_json::to_string(&outcome)?);
            Ok(())
        }
        Command::Eval(a) => eval(a, &layout, w),
        Command::Ablate(a) => ablate(a, &layout, w),
        Command::GradCheck(a) => {
            let report = run_grad_suite(a.seed, a.cases)?;
            print!("{}", report.to_text());
            if !report.passed() {
                return Err(PfsError::Numeric("gradient check exceeded tolerance".into()));
            }
            Ok(())
        }
        Command::CountParams(a) => count(a),
    }
}

fn read_data(layout: &RunLayout) -> Result<(Vec<SceneSample>, Vec<SceneSample>)> {
    let dir = layout.data_dir();
    Ok((read_split(&dir, Split::Train)?, read_split(&dir, Split::Val)?))
}

fn gen_data(a: &GenDataArgs, layout: &RunLayout, workers: usize) -> Result<()> {
    let mut cfg = a.cfg.resolve()?;
    if let Some(s) = a.dataset_seed {
        cfg.dataset.dataset_seed = s;
    }
    if let Some(n) = a.train {
        cfg.dataset.train_samples = n;
    }
    if let Some(n) = a.val {
        cfg.dataset.val_samples = n;
    }
    cfg.validate()?;
    let data = layout.data_dir();
    let occupied = data.read_dir().map(|mut d| d.next().is_some()).unwrap_or(false);
    if occupied && !a.force {
        return Err(PfsError::Config(format!("{} is not empty (use --force to overwrite)", data.display())));
    }
    if a.force && layout.config().exists() {
        std::fs::remove_file(layout.config())?;
    }
    bind_config(&cfg, layout)?;
    let (train, val) = generate_dataset(&cfg, layout, workers)?;
    println!("train {train}");
    println!("val   {val}");
    Ok(())
}

fn take_samples(mut samples: Vec<SceneSample>, limit: Option<usize>) -> Vec<SceneSample> {
    if let Some(n) = limit {
        samples.truncate(n);
    }
    samples
}

struct Corrupted {
    clean: SceneSample,
    corrupted: SceneSample,
    spec: CorruptionSpec,
}

fn corrupt_split(a: &CorruptArgs, layout: &RunLayout, workers: usize) -> Result<(RunConfig, Vec<Corrupted>)> {
    let cfg = load_config(layout)?;
    let kind = CorruptionKind::parse(&a.kind)?;
    pfs_core::corruption::check_level(a.level)?;
    let table = SeverityTable::resolve(cfg.severity_path.as_deref())?;
    let seed = a.global_seed.unwrap_or(cfg.global_seed);
    let samples = take_samples(read_split(&layout.data_dir(), a.split.into())?, a.samples);
    let out = run_pool(workers, || {
        samples
            .into_par_iter()
            .map(|s| {
                let spec = CorruptionSpec::derived(kind, a.level, seed, s.sample_id);
                let c = corrupt_inputs(&s.images, &s.cloud, &[spec], &table)?;
                let corrupted = SceneSample { images: c.images, cloud: c.cloud, ..s.clone() };
                Ok(Corrupted { clean: s, corrupted, spec })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok((cfg, out))
}

fn label(a: &CorruptArgs) -> Result<String> {
    let split: Split = a.split.into();
    Ok(format!("{}.{}-L{}", split.name(), CorruptionKind::parse(&a.kind)?.name(), a.level))
}

#[derive(Serialize)]
struct SeedRecord {
    sample_id: u64,
    kind: &'static str,
    level: u8,
    global_seed: u64,
    seed: u64,
}

fn corrupt(a: &CorruptArgs, layout: &RunLayout, workers: usize) -> Result<()> {
    let (cfg, items) = corrupt_split(a, layout, workers)?;
    let global_seed = a.global_seed.unwrap_or(cfg.global_seed);
    let dir = layout.root.join("corrupt");
    std::fs::create_dir_all(&dir)?;
    let name = label(a)?;
    let samples: Vec<SceneSample> = items.iter().map(|c| c.corrupted.clone()).collect();
    let (bytes, _) = encode_container(cfg.dataset.dataset_seed, &samples);
    std::fs::write(dir.join(format!("{name}.pfsd")), bytes)?;
    let seeds: Vec<SeedRecord> = items
        .iter()
        .map(|c| SeedRecord {
            sample_id: c.clean.sample_id,
            kind: c.spec.kind.name(),
            level: c.spec.level,
            global_seed,
            seed: c.spec.seed,
        })
        .collect();
    let sidecar = dir.join(format!("{name}.seeds.jsonl"));
    let _ = std::fs::remove_file(&sidecar);
    append_jsonl(&sidecar, &seeds)?;
    println!("{name}: {} samples -> {}", items.len(), dir.display());
    Ok(())
}

fn write_grid(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    f(&mut w)?;
    w.flush()?;
    Ok(())
}

fn voxelize(a: &VoxelizeArgs, layout: &RunLayout, workers: usize) -> Result<()> {
    let (cfg, items) = corrupt_split(&a.corruption, layout, workers)?;
    let ext = cfg.scene.extent;
    let dir = layout.root.join("voxels").join(label(&a.corruption)?);
    std::fs::create_dir_all(&dir)?;
    for c in &items {
        let clean = density_grid(&c.clean.cloud, &ext);
        let corr = density_grid(&c.corrupted.cloud, &ext);
        let target = reliability_target(&clean, &corr)?;
        let id = c.clean.sample_id;
        write_grid(&dir.join(format!("{id}.clean.grid")), |w| write_counts(w, &clean))?;
        write_grid(&dir.join(format!("{id}.corrupt.grid")), |w| write_counts(w, &corr))?;
        write_grid(&dir.join(format!("{id}.target.grid")), |w| write_targets(w, &target))?;
    }
    println!("{} samples -> {}", items.len(), dir.display());
    Ok(())
}

struct EvalSetup {
    cfg: RunConfig,
    host: ParamStore<f32>,
    val: Vec<SceneSample>,
    conditions: Vec<Condition>,
    seed: u64,
}

fn eval_setup(a: &EvalArgs, layout: &RunLayout) -> Result<EvalSetup> {
    let cfg = load_config(layout)?;
    let host = load_required(&layout.host(), "host checkpoint")?;
    let val = take_samples(read_split(&layout.data_dir(), Split::Val)?, a.samples);
    let levels = if a.levels.is_empty() { cfg.eval.levels.clone() } else { a.levels.clone() };
    for &l in &levels {
        pfs_core::corruption::check_level(l)?;
    }
    let seed = a.global_seed.unwrap_or(cfg.global_seed);
    Ok(EvalSetup { host, val, conditions: Condition::suite(&levels), seed, cfg })
}

fn write_reports(dir: &Path, table: &str, json: &impl Serialize) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("table.txt"), table)?;
    std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(json)?)?;
    Ok(())
}

fn eval(a: &EvalArgs, layout: &RunLayout, workers: usize) -> Result<()> {
    let s = eval_setup(a, layout)?;
    let pfs = load_required(&layout.stage_final(3), "stage 3 checkpoint")?;
    let variants = [ModelVariant::host_only(), ModelVariant::with_pfs("host+pfs", pfs, ActiveBlocks::ALL)];
    let reports = evaluate_many(&s.cfg, &s.host, &variants, &s.val, &s.conditions, s.seed, workers)?;
    let rows: Vec<_> = reports.iter().map(|r| (r.variant.clone(), r.scores.clone())).collect();
    let table = format_table(&rows);
    let dir = layout.root.join("eval");
    write_reports(&dir, &table, &reports)?;
    let manifest = dir.join("manifest.jsonl");
    let _ = std::fs::remove_file(&manifest);
    append_jsonl(&manifest, &reports[0].manifest)?;
    print!("{table}");
    Ok(())
}

fn ablate(a: &EvalArgs, layout: &RunLayout, workers: usize) -> Result<()> {
    let s = eval_setup(a, layout)?;
    let stage = |n: u8| load_required::<f32>(&layout.stage_final(n), &format!("stage {n} checkpoint"));
    let rows = ablation_matrix(&s.cfg, &s.host, [stage(1)?, stage(2)?, stage(3)?], &s.val, &s.conditions, s.seed, workers)?;
    let table = format_table(&rows.iter().map(|r| (r.name.clone(), r.scores.clone())).collect::<Vec<_>>());
    write_reports(&layout.root.join("ablation"), &table, &rows)?;
    print!("{table}");
    Ok(())
}

#[derive(Serialize)]
struct CountReport {
    analytic: ParamCounts,
    instantiated: ParamCounts,
    host_params: usize,
}

fn count(a: &CountArgs) -> Result<()> {
    let cfg = a.cfg.resolve()?;
    let analytic = analytic_counts(&cfg.pfs);
    let pfs: ParamStore<f32> = init_pfs(&cfg.pfs, &mut rng_from(0))?;
    let host: ParamStore<f32> = init_host(&cfg.host, &mut rng_from(0));
    let r = CountReport { analytic, instantiated: count_params(&pfs), host_params: host.count_prefix("") };
    if a.json {
        println!("{}", serde_json::to_string(&r)?);
        return Ok(());
    }
    println!("{:<8}  {:>12}  {:>12}", "block", "instantiated", "analytic");
    let i = r.instantiated;
    for (name, x, y) in [
        ("block1", i.block1, analytic.block1),
        ("block2", i.block2, analytic.block2),
        ("block3", i.block3, analytic.block3),
        ("total", i.total, analytic.total),
    ] {
        println!("{name:<8}  {x:>12}  {y:>12}");
    }
    println!("host parameters: {}", r.host_params);
    if i != analytic {
        return Err(PfsError::Numeric("instantiated counts differ from the closed form".into()));
    }
    Ok(())
}
