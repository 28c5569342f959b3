//! Artifact-level steps of a run directory; each reuses finished outputs.

use pfs_tensor::{ParamStore, Scalar};

use super::{pretrain_host, run_stage, RunLayout};
use crate::config::RunConfig;
use crate::dataset::{generate_split, read_split, write_split, Split};
use crate::error::{PfsError, Result};
use crate::scene::SceneSample;

/// Record the configuration in the run directory, or check it matches the
/// one already there.
pub fn bind_config(cfg: &RunConfig, layout: &RunLayout) -> Result<()> {
    std::fs::create_dir_all(&layout.root)?;
    let path = layout.config();
    if path.exists() {
        let existing = RunConfig::from_toml(&std::fs::read_to_string(&path)?)?;
        if &existing != cfg {
            return Err(PfsError::Config(format!("{} holds a different configuration", path.display())));
        }
        return Ok(());
    }
    std::fs::write(path, cfg.to_toml())?;
    Ok(())
}

/// Load the run directory's configuration.
pub fn load_config(layout: &RunLayout) -> Result<RunConfig> {
    let path = layout.config();
    let text = std::fs::read_to_string(&path)
        .map_err(|e| PfsError::Dependency(format!("run configuration {} not readable: {e}", path.display())))?;
    RunConfig::from_toml(&text)
}

pub fn generate_dataset(cfg: &RunConfig, layout: &RunLayout, workers: usize) -> Result<(usize, usize)> {
    let d = &cfg.dataset;
    let dir = layout.data_dir();
    for (split, n) in [(Split::Train, d.train_samples), (Split::Val, d.val_samples)] {
        let samples = generate_split(d.dataset_seed, split, n, &cfg.scene, workers)?;
        write_split(&dir, split, d.dataset_seed, &samples)?;
        log::info!("{}: {} samples", split.name(), samples.len());
    }
    Ok((d.train_samples, d.val_samples))
}

pub fn ensure_dataset(cfg: &RunConfig, layout: &RunLayout, workers: usize) -> Result<(Vec<SceneSample>, Vec<SceneSample>)> {
    let dir = layout.data_dir();
    if !dir.join(Split::Train.container_file()).exists() || !dir.join(Split::Val.container_file()).exists() {
        generate_dataset(cfg, layout, workers)?;
    }
    Ok((read_split(&dir, Split::Train)?, read_split(&dir, Split::Val)?))
}

pub fn ensure_host<T: Scalar>(
    cfg: &RunConfig,
    layout: &RunLayout,
    train: &[SceneSample],
    val: &[SceneSample],
    workers: usize,
) -> Result<ParamStore<T>> {
    if layout.host().exists() {
        return Ok(ParamStore::load(layout.host())?);
    }
    Ok(pretrain_host(cfg, train, val, layout, workers)?.0)
}

pub fn ensure_stage<T: Scalar>(
    cfg: &RunConfig,
    layout: &RunLayout,
    stage: u8,
    train: &[SceneSample],
    workers: usize,
) -> Result<ParamStore<T>> {
    let path = layout.stage_final(stage);
    if !path.exists() {
        run_stage::<T>(cfg, stage, train, layout, workers)?;
    }
    Ok(ParamStore::load(path)?)
}
