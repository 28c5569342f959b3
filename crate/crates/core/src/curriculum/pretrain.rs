//! Clean-data pretraining of the host detector, which is frozen afterwards.

use pfs_tensor::{clip_grad_norm, cosine_lr, AdamW, AdamWConfig, GradMap, ParamStore, Scalar, Tape};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::eval::score_frames;
use super::frame::{prepare_frame, Frame, FrameContext};
use super::train::epoch_order;
use super::{append_jsonl, RunLayout};
use crate::config::RunConfig;
use crate::error::{PfsError, Result};
use crate::host::{self, init_host};
use crate::loss::detection_loss;
use crate::scene::SceneSample;
use crate::seeding::{mix_fields, rng_from, stream};

/// Loose clip for the first steps from a random init.
const HOST_CLIP: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainRecord {
    pub phase: String,
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_map: f64,
    pub best: bool,
}

fn host_step<T: Scalar>(
    cfg: &RunConfig,
    params: &mut ParamStore<T>,
    opt: &mut AdamW<T>,
    frames: &[Frame<T>],
    lr: f64,
) -> Result<f64> {
    let mut acc = GradMap::new();
    let w = 1.0 / frames.len().max(1) as f64;
    let mut loss = 0.0;
    for f in frames {
        let mut tape = Tape::new();
        let hp = params.bind(&mut tape, |_| true);
        let lid = tape.constant(f.lidar_in.clone());
        let cam = tape.constant(f.camera_in.clone());
        let feats = host::encode(&mut tape, &hp, lid, cam)?;
        let head = host::detect_head(&mut tape, &hp, feats.fused)?;
        let l = detection_loss(&mut tape, &head, &f.targets, &cfg.loss)?;
        loss += tape.value(l).item().as_f64() * w;
        let scaled = tape.affine(l, T::lit(w), T::zero())?;
        let mut grads = tape.backward(scaled)?;
        for (name, g) in hp.collect_grads(&mut grads) {
            match acc.get_mut(&name) {
                Some(a) => a.add_assign(&g),
                None => {
                    acc.insert(name, g);
                }
            }
        }
    }
    if !loss.is_finite() || acc.values().any(|g| !g.is_finite()) {
        return Err(PfsError::Numeric(format!("non-finite host loss {loss} at step {}", opt.step_count())));
    }
    clip_grad_norm(&mut acc, HOST_CLIP);
    opt.step(params, |_| true, &acc, lr)?;
    Ok(loss)
}

/// Train the host on clean scenes, keep the best validation checkpoint and
/// stop after `patience` epochs without improvement.
pub fn pretrain_host<T: Scalar>(
    cfg: &RunConfig,
    train: &[SceneSample],
    val: &[SceneSample],
    layout: &RunLayout,
    workers: usize,
) -> Result<(ParamStore<T>, Vec<PretrainRecord>)> {
    let pc = &cfg.pretrain;
    let ctx = FrameContext::new(cfg)?;
    let mut params: ParamStore<T> = init_host(&cfg.host, &mut rng_from(mix_fields(&[stream::INIT, cfg.training_seed, 0])));
    let mut opt = AdamW::new(AdamWConfig { weight_decay: pc.weight_decay, ..Default::default() });
    let steps_per_epoch = train.len().div_ceil(pc.batch_size);
    let total = (steps_per_epoch * pc.max_epochs).max(1);
    let val = &val[..pc.val_samples.min(val.len())];
    let pool = rayon::ThreadPoolBuilder::new().num_threads(workers.max(1)).build().expect("thread pool");
    let val_frames: Vec<Frame<T>> =
        pool.install(|| val.par_iter().map(|s| prepare_frame(s, &[], &ctx)).collect::<Result<Vec<_>>>())?;

    let mut best: Option<(f64, ParamStore<T>)> = None;
    let mut since_best = 0;
    let mut records = Vec::new();
    let mut step = 0;
    for epoch in 0..pc.max_epochs {
        let order = epoch_order(cfg.training_seed, 0, epoch, train.len());
        let mut loss_sum = 0.0;
        for chunk in order.chunks(pc.batch_size) {
            let frames: Vec<Frame<T>> = pool
                .install(|| chunk.par_iter().map(|&i| prepare_frame(&train[i], &[], &ctx)).collect::<Result<Vec<_>>>())?;
            loss_sum += host_step(cfg, &mut params, &mut opt, &frames, cosine_lr(step, total, pc.lr0)?)?;
            step += 1;
        }
        let val_map = score_frames(cfg, &params, None, &val_frames, val, &pool)?;
        let improved = best.as_ref().is_none_or(|(b, _)| val_map > *b);
        if improved {
            best = Some((val_map, params.clone()));
            since_best = 0;
        } else {
            since_best += 1;
        }
        let rec = PretrainRecord {
            phase: "pretrain".into(),
            epoch,
            mean_loss: loss_sum / steps_per_epoch.max(1) as f64,
            val_map,
            best: improved,
        };
        log::info!("pretrain epoch {epoch}: loss {:.4} val mAP {:.2}", rec.mean_loss, val_map);
        append_jsonl(&layout.metrics(), std::slice::from_ref(&rec))?;
        records.push(rec);
        if since_best >= pc.patience {
            break;
        }
    }
    let host = best.map_or(params, |(_, p)| p);
    std::fs::create_dir_all(&layout.root)?;
    host.save(layout.host())?;
    Ok((host, records))
}
