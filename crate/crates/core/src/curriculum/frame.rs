//! Turning a scene plus corruption specs into network-ready tensors.

use pfs_tensor::{BoundParams, ParamStore, Scalar, Tape, Tensor};

use crate::config::{CorruptionIndicator, PfsConfig, RunConfig, SceneConfig};
use crate::corruption::{corrupt_inputs, CorruptionSpec, SeverityTable};
use crate::error::Result;
use crate::host::{self, render_targets, DetectionTargets, SplatMap};
use crate::scene::{SceneSample, NUM_CLASSES};
use crate::stabilizer::{pfs_forward, ActiveBlocks};
use crate::voxel::{align_target, density_grid, reliability_target};

/// Everything that stays fixed while a frame passes through the pipeline.
#[derive(Clone, Debug)]
pub struct FrameContext {
    pub scene: SceneConfig,
    pub splat: SplatMap,
    pub severity: SeverityTable,
    pub indicator: CorruptionIndicator,
}

impl FrameContext {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        Ok(FrameContext {
            scene: cfg.scene.clone(),
            splat: SplatMap::from_config(&cfg.scene),
            severity: SeverityTable::resolve(cfg.severity_path.as_deref())?,
            indicator: cfg.loss.indicator,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Frame<T> {
    pub sample_id: u64,
    pub lidar_in: Tensor<T>,
    pub camera_in: Tensor<T>,
    pub targets: DetectionTargets,
    /// Reliability target `[1, H, W]` from clean vs corrupted densities.
    pub rel_target: Tensor<T>,
    pub lidar_corrupted: bool,
    pub camera_corrupted: bool,
}

impl<T> Frame<T> {
    /// Which reliability-loss branch the frame takes.
    pub fn is_corr(&self, indicator: CorruptionIndicator) -> bool {
        match indicator {
            CorruptionIndicator::LidarOnly => self.lidar_corrupted,
            CorruptionIndicator::Any => self.lidar_corrupted || self.camera_corrupted,
        }
    }
}

pub fn prepare_frame<T: Scalar>(sample: &SceneSample, specs: &[CorruptionSpec], ctx: &FrameContext) -> Result<Frame<T>> {
    let extent = &ctx.scene.extent;
    let inputs = corrupt_inputs(&sample.images, &sample.cloud, specs, &ctx.severity)?;
    let lidar_corrupted = specs.iter().any(|s| !s.kind.is_camera());
    let rel = if lidar_corrupted {
        let t = reliability_target(&density_grid(&sample.cloud, extent), &density_grid(&inputs.cloud, extent))?;
        align_target(&t, extent.rows, extent.cols)
    } else {
        vec![1.0; extent.num_cells()]
    };
    Ok(Frame {
        sample_id: sample.sample_id,
        lidar_in: host::lidar_input(&inputs.cloud, extent),
        camera_in: host::camera_input(&inputs.images, &ctx.splat),
        targets: render_targets(&sample.boxes, extent, NUM_CLASSES),
        rel_target: Tensor::from_vec(&[1, extent.rows, extent.cols], rel.into_iter().map(|v| T::lit(v as f64)).collect())?,
        lidar_corrupted,
        camera_corrupted: specs.iter().any(|s| s.kind.is_camera()),
    })
}

/// Optional stabilizer in front of the head.
#[derive(Clone, Copy, Debug)]
pub struct StabilizerRef<'a, T> {
    pub params: &'a ParamStore<T>,
    pub cfg: &'a PfsConfig,
    pub active: ActiveBlocks,
}

/// Raw head outputs for one frame, plus the mean reliability when Block 2 ran.
#[derive(Clone, Debug)]
pub struct Inference {
    pub heat: Vec<f32>,
    pub reg: Vec<f32>,
    pub mean_reliability: Option<f64>,
}

pub fn infer<T: Scalar>(host_params: &ParamStore<T>, pfs: Option<StabilizerRef<'_, T>>, frame: &Frame<T>) -> Result<Inference> {
    let mut tape = Tape::new();
    let hp = host_params.bind(&mut tape, |_| false);
    let pp = pfs.map(|s| s.params.bind(&mut tape, |_| false)).unwrap_or_default();
    let lid = tape.constant(frame.lidar_in.clone());
    let cam = tape.constant(frame.camera_in.clone());
    let feats = host::encode(&mut tape, &hp, lid, cam)?;
    let (f, mean_r) = forward_stabilizer(&mut tape, &pp, feats, pfs)?;
    let out = host::detect_head(&mut tape, &hp, f)?;
    let to32 = |t: &Tensor<T>| t.data().iter().map(|v| v.as_f64() as f32).collect::<Vec<_>>();
    Ok(Inference { heat: to32(tape.value(out.heat)), reg: to32(tape.value(out.reg)), mean_reliability: mean_r })
}

fn forward_stabilizer<T: Scalar>(
    tape: &mut Tape<T>,
    pp: &BoundParams,
    feats: host::HostFeatures,
    pfs: Option<StabilizerRef<'_, T>>,
) -> Result<(pfs_tensor::Var, Option<f64>)> {
    let Some(s) = pfs else { return Ok((feats.fused, None)) };
    let out = pfs_forward(tape, pp, feats.fused, Some(feats.lidar), s.cfg, s.active)?;
    let mean_r = out.reliability.map(|r| tape.value(r).mean().as_f64());
    Ok((out.out, mean_r))
}
