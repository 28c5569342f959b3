//! One curriculum stage: frozen host, selected stabilizer blocks trainable.

use pfs_tensor::{clip_grad_norm, cosine_lr, AdamW, AdamWConfig, GradMap, ParamStore, Scalar, Tape, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::frame::{prepare_frame, Frame, FrameContext};
use super::{append_jsonl, load_required, params_hash, RunLayout};
use crate::config::{PfsConfig, RunConfig, StageConfig};
use crate::corruption::{sample_corruption_mix, CorruptionMix};
use crate::error::{PfsError, Result};
use crate::host;
use crate::loss::{detection_loss, reliability_loss, total_loss, LossBreakdown};
use crate::scene::SceneSample;
use crate::seeding::{mix_fields, rng_from, stream};
use crate::stabilizer::{block_of, init_pfs, pfs_forward, ActiveBlocks};
use rayon::prelude::*;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub phase: String,
    pub stage: u8,
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
    /// Batch means of the per-sample terms.
    pub l_det: f64,
    pub l_rel: f64,
    pub l_total: f64,
    pub n_corr: usize,
    pub n_clean: usize,
}

/// Training-time corruption draw for one sample in one epoch.
pub fn training_mix(training_seed: u64, stage: &StageConfig, epoch: usize, sample_id: u64) -> Result<CorruptionMix> {
    let mut rng = rng_from(mix_fields(&[stream::MIX, training_seed, stage.stage_id as u64, epoch as u64, sample_id]));
    sample_corruption_mix(&mut rng, stage.corruption_prob, &stage.corruption_pool)
}

/// Seeded pass order for one epoch.
pub fn epoch_order(training_seed: u64, stage_id: u8, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_from(mix_fields(&[stream::SHUFFLE, training_seed, stage_id as u64, epoch as u64])));
    order
}

fn trainable_in(stage: &StageConfig) -> impl Fn(&str) -> bool + '_ {
    move |name| block_of(name).is_some_and(|b| stage.trainable_blocks.contains(&b))
}

/// Forward and backward of one sample's loss scaled by `weight`; gradients of
/// the stage's trainable parameters are added into `acc`.
#[allow(clippy::too_many_arguments)]
pub fn accumulate_sample<T: Scalar>(
    host_params: &ParamStore<T>,
    pfs_params: &ParamStore<T>,
    pfs_cfg: &PfsConfig,
    stage: &StageConfig,
    frame: &Frame<T>,
    ctx: &FrameContext,
    loss_cfg: &crate::config::LossConfig,
    weight: f64,
    acc: &mut GradMap<T>,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let hp = host_params.bind(&mut tape, |_| false);
    let pp = pfs_params.bind(&mut tape, trainable_in(stage));
    let lid = tape.constant(frame.lidar_in.clone());
    let cam = tape.constant(frame.camera_in.clone());
    let feats = host::encode(&mut tape, &hp, lid, cam)?;
    let out = pfs_forward(&mut tape, &pp, feats.fused, Some(feats.lidar), pfs_cfg, ActiveBlocks::from_list(&stage.active_blocks))?;
    let head = host::detect_head(&mut tape, &hp, out.out)?;
    let l_det = detection_loss(&mut tape, &head, &frame.targets, loss_cfg)?;
    let is_corr = frame.is_corr(ctx.indicator);
    let (total, l_rel) = match out.reliability {
        Some(r) => {
            let l_rel = reliability_loss(&mut tape, r, &frame.rel_target, is_corr, !is_corr, stage.alpha_anchor, loss_cfg.log_eps)?;
            (total_loss(&mut tape, l_det, l_rel, stage.lambda_rel)?, Some(l_rel))
        }
        None => (l_det, None),
    };
    let rec = LossBreakdown {
        l_det: tape.value(l_det).item().as_f64(),
        l_rel: l_rel.map_or(0.0, |v| tape.value(v).item().as_f64()),
        l_total: tape.value(total).item().as_f64(),
        is_corr,
        is_clean: !is_corr,
    };
    let scaled = tape.affine(total, T::lit(weight), T::zero())?;
    let mut grads = tape.backward(scaled)?;
    for (name, g) in pp.collect_grads(&mut grads) {
        match acc.get_mut(&name) {
            Some(a) => a.add_assign(&g),
            None => {
                acc.insert(name, g);
            }
        }
    }
    Ok(rec)
}

/// Mutable state of a stage in progress.
pub struct StageState<T> {
    pub pfs: ParamStore<T>,
    pub opt: AdamW<T>,
    pub step: usize,
}

/// One optimizer step on a batch of prepared frames.
///
/// Per-sample gradients of `loss_i / B` are accumulated, clipped when the
/// stage says so, then AdamW updates the trainable blocks only. Trainable
/// parameters the graph did not reach (none in practice) get zero gradient.
pub fn train_step<T: Scalar>(
    cfg: &RunConfig,
    stage: &StageConfig,
    host_params: &ParamStore<T>,
    state: &mut StageState<T>,
    frames: &[Frame<T>],
    ctx: &FrameContext,
    lr: f64,
) -> Result<(StepRecord, Vec<LossBreakdown>)> {
    let mut acc = GradMap::new();
    let w = 1.0 / frames.len().max(1) as f64;
    let mut parts = Vec::with_capacity(frames.len());
    for f in frames {
        parts.push(accumulate_sample(host_params, &state.pfs, &cfg.pfs, stage, f, ctx, &cfg.loss, w, &mut acc)?);
    }
    let trainable = trainable_in(stage);
    for (name, p) in state.pfs.iter() {
        if trainable(name) && !acc.contains_key(name) {
            acc.insert(name.to_string(), Tensor::zeros(p.shape()));
        }
    }
    let mean = |f: fn(&LossBreakdown) -> f64| parts.iter().map(f).sum::<f64>() * w;
    let (l_det, l_rel, l_total) = (mean(|b| b.l_det), mean(|b| b.l_rel), mean(|b| b.l_total));
    if !l_total.is_finite() || acc.values().any(|g| !g.is_finite()) {
        return Err(PfsError::Numeric(format!(
            "non-finite loss or gradient at stage {} step {} (loss {l_total})",
            stage.stage_id, state.step
        )));
    }
    let grad_norm = match stage.clip_max_norm {
        Some(m) => clip_grad_norm(&mut acc, m),
        None => pfs_tensor::global_norm(&acc),
    };
    state.opt.step(&mut state.pfs, &trainable, &acc, lr)?;
    let rec = StepRecord {
        phase: "train".into(),
        stage: stage.stage_id,
        epoch: 0,
        step: state.step,
        lr,
        grad_norm,
        clipped: stage.clip_max_norm.is_some_and(|m| grad_norm > m),
        l_det,
        l_rel,
        l_total,
        n_corr: parts.iter().filter(|b| b.is_corr).count(),
        n_clean: parts.iter().filter(|b| b.is_clean).count(),
    };
    state.step += 1;
    Ok((rec, parts))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageOutcome {
    pub stage: u8,
    pub epochs_run: usize,
    pub resumed_from: Option<usize>,
    pub steps: usize,
    pub final_lr: f64,
    pub host_hash: String,
    pub mean_loss_last_epoch: f64,
}

fn starting_params<T: Scalar>(cfg: &RunConfig, layout: &RunLayout, stage: u8) -> Result<ParamStore<T>> {
    if stage == 1 {
        let mut rng = rng_from(mix_fields(&[stream::INIT, cfg.training_seed]));
        init_pfs(&cfg.pfs, &mut rng)
    } else {
        load_required(&layout.stage_final(stage - 1), &format!("stage {}", stage - 1))
    }
}

fn latest_epoch(layout: &RunLayout, stage: u8, epochs: usize) -> Option<usize> {
    (0..epochs).rev().find(|&e| layout.epoch_ckpt(stage, e).exists() && layout.epoch_opt(stage, e).exists())
}

/// Run (or resume) a stage end to end, writing per-epoch checkpoints, step
/// metrics and the stage's final checkpoint into `layout`.
pub fn run_stage<T: Scalar>(
    cfg: &RunConfig,
    stage_id: u8,
    train: &[SceneSample],
    layout: &RunLayout,
    workers: usize,
) -> Result<StageOutcome> {
    let stage = cfg.stage(stage_id)?.clone();
    let host_params: ParamStore<T> = load_required(&layout.host(), "host")?;
    let host_hash = params_hash(&host_params);
    let ctx = FrameContext::new(cfg)?;
    let steps_per_epoch = train.len().div_ceil(stage.batch_size);
    let total_steps = (steps_per_epoch * stage.epochs).max(1);
    let opt_cfg = AdamWConfig { weight_decay: stage.weight_decay, ..Default::default() };

    let resumed_from = latest_epoch(layout, stage_id, stage.epochs);
    let mut state = match resumed_from {
        Some(e) => {
            let opt_state = ParamStore::load(layout.epoch_opt(stage_id, e))?;
            StageState {
                pfs: ParamStore::load(layout.epoch_ckpt(stage_id, e))?,
                opt: AdamW::from_state(opt_cfg, &opt_state)?,
                step: (e + 1) * steps_per_epoch,
            }
        }
        None => StageState { pfs: starting_params(cfg, layout, stage_id)?, opt: AdamW::new(opt_cfg), step: 0 },
    };
    let first_epoch = resumed_from.map_or(0, |e| e + 1);
    std::fs::create_dir_all(layout.stage_dir(stage_id))?;

    let pool = rayon::ThreadPoolBuilder::new().num_threads(workers.max(1)).build().expect("thread pool");
    let mut last_lr = cosine_lr(state.step, total_steps, stage.lr0)?;
    let mut mean_loss = f64::NAN;
    for epoch in first_epoch..stage.epochs {
        let order = epoch_order(cfg.training_seed, stage_id, epoch, train.len());
        let mut records = Vec::with_capacity(steps_per_epoch);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(stage.batch_size) {
            let frames: Vec<Frame<T>> = pool.install(|| {
                chunk
                    .par_iter()
                    .map(|&i| {
                        let s = &train[i];
                        let mix = training_mix(cfg.training_seed, &stage, epoch, s.sample_id)?;
                        prepare_frame(s, &mix.specs(), &ctx)
                    })
                    .collect::<Result<Vec<_>>>()
            })?;
            let lr = cosine_lr(state.step, total_steps, stage.lr0)?;
            let (mut rec, _) = train_step(cfg, &stage, &host_params, &mut state, &frames, &ctx, lr).map_err(|e| match e {
                PfsError::Numeric(m) => PfsError::Numeric(format!("{m}; last good checkpoint: {}", last_good(layout, stage_id, epoch))),
                other => other,
            })?;
            rec.epoch = epoch;
            loss_sum += rec.l_total;
            last_lr = lr;
            log::debug!("stage {stage_id} epoch {epoch} step {} loss {:.5} |g| {:.4}", rec.step, rec.l_total, rec.grad_norm);
            records.push(rec);
        }
        mean_loss = loss_sum / records.len().max(1) as f64;
        log::info!("stage {stage_id} epoch {epoch}: mean loss {mean_loss:.5}");
        append_jsonl(&layout.metrics(), &records)?;
        state.pfs.save(layout.epoch_ckpt(stage_id, epoch))?;
        state.opt.state().save(layout.epoch_opt(stage_id, epoch))?;
    }
    state.pfs.save(layout.stage_final(stage_id))?;
    if params_hash(&host_params) != host_hash {
        return Err(PfsError::Numeric("host parameters changed during a stage".into()));
    }
    Ok(StageOutcome {
        stage: stage_id,
        epochs_run: stage.epochs - first_epoch,
        resumed_from,
        steps: state.step,
        final_lr: last_lr,
        host_hash,
        mean_loss_last_epoch: mean_loss,
    })
}

fn last_good(layout: &RunLayout, stage: u8, epoch: usize) -> String {
    match epoch.checked_sub(1) {
        Some(e) => layout.epoch_ckpt(stage, e).display().to_string(),
        None if stage > 1 => layout.stage_final(stage - 1).display().to_string(),
        None => layout.host().display().to_string(),
    }
}

/// True when every parameter outside `blocks` matches bit for bit.
pub fn blocks_unchanged<T: Scalar>(before: &ParamStore<T>, after: &ParamStore<T>, blocks: &[u8]) -> bool {
    before.iter().filter(|(n, _)| block_of(n).is_some_and(|b| blocks.contains(&b))).all(|(n, t)| after.get(n) == Some(t))
}
