//! Evaluation over the corruption suite and the A0-A3 ablation.

use pfs_tensor::{ParamStore, Scalar};
use rayon::prelude::*;
use rayon::ThreadPool;
use serde::{Deserialize, Serialize};

use super::frame::{infer, prepare_frame, Frame, FrameContext, StabilizerRef};
use super::params_hash;
use crate::config::RunConfig;
use crate::corruption::{CorruptionKind, CorruptionSpec};
use crate::error::Result;
use crate::host::{decode_detections, map_proxy};
use crate::scene::{SceneSample, NUM_CLASSES};
use crate::stabilizer::ActiveBlocks;

/// One evaluation condition; `kind = None` is the clean input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Condition {
    pub kind: Option<CorruptionKind>,
    pub level: u8,
}

impl Condition {
    pub const CLEAN: Condition = Condition { kind: None, level: 0 };

    pub fn new(kind: CorruptionKind, level: u8) -> Self {
        Condition { kind: Some(kind), level }
    }

    pub fn label(&self) -> String {
        match self.kind {
            None => "clean".into(),
            Some(k) => format!("{}-L{}", k.name(), self.level),
        }
    }

    /// Clean plus every kind at every requested level.
    pub fn suite(levels: &[u8]) -> Vec<Condition> {
        let mut v = vec![Condition::CLEAN];
        for &l in levels {
            v.extend(CorruptionKind::ALL.iter().map(|&k| Condition::new(k, l)));
        }
        v
    }

    pub fn spec(&self, global_seed: u64, sample_id: u64) -> Option<CorruptionSpec> {
        self.kind.map(|k| CorruptionSpec::derived(k, self.level, global_seed, sample_id))
    }
}

/// A host with an optional stabilizer and the blocks it runs.
#[derive(Clone, Debug)]
pub struct ModelVariant<T> {
    pub name: String,
    pub pfs: Option<(ParamStore<T>, ActiveBlocks)>,
}

impl<T: Scalar> ModelVariant<T> {
    pub fn host_only() -> Self {
        ModelVariant { name: "host".into(), pfs: None }
    }

    pub fn with_pfs(name: impl Into<String>, params: ParamStore<T>, active: ActiveBlocks) -> Self {
        ModelVariant { name: name.into(), pfs: Some((params, active)) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionScore {
    pub condition: String,
    /// mAP proxy in points (0-100).
    pub map: f64,
    pub mean_reliability: Option<f64>,
}

/// Corruption actually applied to one evaluation sample.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub condition: String,
    pub sample_id: u64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: String,
    pub global_seed: u64,
    /// Hash of host plus stabilizer parameters.
    pub checkpoint: String,
    pub samples: usize,
    pub scores: Vec<ConditionScore>,
    pub manifest: Vec<ManifestEntry>,
}

impl EvalReport {
    pub fn score(&self, condition: &str) -> Option<f64> {
        self.scores.iter().find(|s| s.condition == condition).map(|s| s.map)
    }
}

fn stabilizer_ref<'a, T>(cfg: &'a RunConfig, v: &'a ModelVariant<T>) -> Option<StabilizerRef<'a, T>> {
    v.pfs.as_ref().map(|(params, active)| StabilizerRef { params, cfg: &cfg.pfs, active: *active })
}

/// mAP proxy (points) and mean reliability over already prepared frames.
fn score_with<T: Scalar>(
    cfg: &RunConfig,
    host: &ParamStore<T>,
    pfs: Option<StabilizerRef<'_, T>>,
    frames: &[Frame<T>],
    samples: &[SceneSample],
    pool: &ThreadPool,
) -> Result<(f64, Option<f64>)> {
    let ext = &cfg.scene.extent;
    let outs = pool.install(|| frames.par_iter().map(|f| infer(host, pfs, f)).collect::<Result<Vec<_>>>())?;
    let preds: Vec<_> = outs
        .iter()
        .map(|o| decode_detections(&o.heat, &o.reg, NUM_CLASSES, ext, cfg.eval.score_threshold as f32, cfg.eval.max_detections))
        .collect();
    let gts: Vec<_> = samples.iter().map(|s| s.boxes.clone()).collect();
    let map = 100.0 * map_proxy(&preds, &gts, &cfg.eval.distance_thresholds, NUM_CLASSES);
    let rs: Vec<f64> = outs.iter().filter_map(|o| o.mean_reliability).collect();
    let mean_r = (!rs.is_empty()).then(|| rs.iter().sum::<f64>() / rs.len() as f64);
    Ok((map, mean_r))
}

pub(crate) fn score_frames<T: Scalar>(
    cfg: &RunConfig,
    host: &ParamStore<T>,
    pfs: Option<StabilizerRef<'_, T>>,
    frames: &[Frame<T>],
    samples: &[SceneSample],
    pool: &ThreadPool,
) -> Result<f64> {
    Ok(score_with(cfg, host, pfs, frames, samples, pool)?.0)
}

/// Corrupted frames for one condition; seeds depend only on the global seed,
/// the sample id and the condition, so every variant sees identical inputs.
fn condition_frames<T: Scalar>(
    c: &Condition,
    samples: &[SceneSample],
    global_seed: u64,
    ctx: &FrameContext,
    pool: &ThreadPool,
) -> Result<Vec<Frame<T>>> {
    pool.install(|| {
        samples
            .par_iter()
            .map(|s| {
                let specs: Vec<_> = c.spec(global_seed, s.sample_id).into_iter().collect();
                prepare_frame(s, &specs, ctx)
            })
            .collect()
    })
}

fn manifest_for(conditions: &[Condition], samples: &[SceneSample], global_seed: u64) -> Vec<ManifestEntry> {
    let mut m = Vec::new();
    for c in conditions {
        for s in samples {
            if let Some(spec) = c.spec(global_seed, s.sample_id) {
                m.push(ManifestEntry { condition: c.label(), sample_id: s.sample_id, seed: spec.seed });
            }
        }
    }
    m
}

fn variant_hash<T: Scalar>(host: &ParamStore<T>, v: &ModelVariant<T>) -> String {
    let mut all = host.clone();
    if let Some((p, _)) = &v.pfs {
        all.merge(p);
    }
    params_hash(&all)
}

/// Score several variants on the same corrupted inputs. Frames are built once
/// per condition and shared by every variant.
pub fn evaluate_many<T: Scalar>(
    cfg: &RunConfig,
    host: &ParamStore<T>,
    variants: &[ModelVariant<T>],
    samples: &[SceneSample],
    conditions: &[Condition],
    global_seed: u64,
    workers: usize,
) -> Result<Vec<EvalReport>> {
    let ctx = FrameContext::new(cfg)?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(workers.max(1)).build().expect("thread pool");
    let manifest = manifest_for(conditions, samples, global_seed);
    let mut reports: Vec<EvalReport> = variants
        .iter()
        .map(|v| EvalReport {
            variant: v.name.clone(),
            global_seed,
            checkpoint: variant_hash(host, v),
            samples: samples.len(),
            scores: Vec::new(),
            manifest: manifest.clone(),
        })
        .collect();
    for c in conditions {
        let frames = condition_frames::<T>(c, samples, global_seed, &ctx, &pool)?;
        for (v, rep) in variants.iter().zip(&mut reports) {
            let (map, mean_reliability) = score_with(cfg, host, stabilizer_ref(cfg, v), &frames, samples, &pool)?;
            log::info!("{} {}: {map:.2}", v.name, c.label());
            rep.scores.push(ConditionScore { condition: c.label(), map, mean_reliability });
        }
    }
    Ok(reports)
}

pub fn evaluate<T: Scalar>(
    cfg: &RunConfig,
    host: &ParamStore<T>,
    variant: &ModelVariant<T>,
    samples: &[SceneSample],
    conditions: &[Condition],
    global_seed: u64,
    workers: usize,
) -> Result<EvalReport> {
    let mut r = evaluate_many(cfg, host, std::slice::from_ref(variant), samples, conditions, global_seed, workers)?;
    Ok(r.remove(0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub scores: Vec<ConditionScore>,
}

/// A0 host only, A1 stage-1 Block 1, A2 stage-2 Blocks 1-2, A3 stage-3 full.
pub fn ablation_variants<T: Scalar>(stage1: ParamStore<T>, stage2: ParamStore<T>, stage3: ParamStore<T>) -> Vec<ModelVariant<T>> {
    vec![
        ModelVariant { name: "A0".into(), pfs: None },
        ModelVariant::with_pfs("A1", stage1, ActiveBlocks::from_list(&[1])),
        ModelVariant::with_pfs("A2", stage2, ActiveBlocks::from_list(&[1, 2])),
        ModelVariant::with_pfs("A3", stage3, ActiveBlocks::ALL),
    ]
}

#[allow(clippy::too_many_arguments)]
pub fn ablation_matrix<T: Scalar>(
    cfg: &RunConfig,
    host: &ParamStore<T>,
    stages: [ParamStore<T>; 3],
    samples: &[SceneSample],
    conditions: &[Condition],
    global_seed: u64,
    workers: usize,
) -> Result<Vec<AblationRow>> {
    let [s1, s2, s3] = stages;
    let variants = ablation_variants(s1, s2, s3);
    let reports = evaluate_many(cfg, host, &variants, samples, conditions, global_seed, workers)?;
    Ok(reports.into_iter().map(|r| AblationRow { name: r.variant, scores: r.scores }).collect())
}

/// Rows = models, columns = conditions, scores with two decimals.
pub fn format_table(rows: &[(String, Vec<ConditionScore>)]) -> String {
    let Some((_, first)) = rows.first() else { return String::new() };
    let headers: Vec<&str> = first.iter().map(|s| s.condition.as_str()).collect();
    let name_w = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(5);
    let widths: Vec<usize> = headers.iter().map(|h| h.len().max(6)).collect();
    let mut out = format!("{:<name_w$}", "model");
    for (h, w) in headers.iter().zip(&widths) {
        out.push_str(&format!("  {h:>w$}"));
    }
    out.push('\n');
    for (name, scores) in rows {
        out.push_str(&format!("{name:<name_w$}"));
        for (s, w) in scores.iter().zip(&widths) {
            out.push_str(&format!("  {:>w$.2}", s.map));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_covers_clean_and_all_kinds() {
        let s = Condition::suite(&[3]);
        assert_eq!(s.len(), 9);
        assert_eq!(s[0].label(), "clean");
        assert!(s[1..].iter().all(|c| c.level == 3));
        assert_eq!(Condition::suite(&[1, 3]).len(), 17);
    }

    #[test]
    fn table_is_aligned() {
        let row = |n: &str, v: f64| {
            (n.to_string(), vec![ConditionScore { condition: "clean".into(), map: v, mean_reliability: None }])
        };
        let t = format_table(&[row("A0", 51.234), row("A3", 7.0)]);
        let lines: Vec<_> = t.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines.iter().all(|l| l.len() == lines[0].len()));
        assert!(lines[1].ends_with("51.23"));
    }
}
