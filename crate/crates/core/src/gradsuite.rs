//! Finite-difference verification of every differentiable layer and of the
//! whole stabilizer + loss graph, in 64-bit.

use pfs_tensor::gradcheck::check_gradients;
use pfs_tensor::{BoundParams, FocalParams, ParamStore, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{HostConfig, LossConfig, PfsConfig};
use crate::error::Result;
use crate::host::{detect_head, init_host, DetectionTargets};
use crate::loss::{detection_loss, reliability_loss, total_loss};
use crate::seeding::mix_fields;
use crate::stabilizer::{init_pfs, pfs_forward, ActiveBlocks};

pub const GRAD_TOLERANCE: f64 = 1e-4;

/// Coordinates sampled per input tensor.
const COORDS: usize = 12;

/// Central-difference step. The LiDAR features' gradients in the pipeline
/// case are around 1e-6 against a loss of order one, so smaller steps drown
/// in roundoff; kinks inside the wider stencil are detected by the checker.
const STEP: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCheck {
    pub layer: String,
    pub cases: usize,
    pub max_rel_err: f64,
    /// Checked coordinates that sat within one step of a ReLU/clamp boundary.
    pub kinks: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub tolerance: f64,
    pub layers: Vec<LayerCheck>,
}

impl GradReport {
    pub fn total_cases(&self) -> usize {
        self.layers.iter().map(|l| l.cases).sum()
    }

    pub fn passed(&self) -> bool {
        self.layers.iter().all(|l| l.max_rel_err <= self.tolerance)
    }

    pub fn to_text(&self) -> String {
        let w = self.layers.iter().map(|l| l.layer.len()).max().unwrap_or(5).max(5);
        let mut s = format!("{:<w$}  {:>5}  {:>12}  {:>5}  status\n", "layer", "cases", "max_rel_err", "kinks");
        for l in &self.layers {
            let ok = if l.max_rel_err <= self.tolerance { "ok" } else { "FAIL" };
            s.push_str(&format!("{:<w$}  {:>5}  {:>12.3e}  {:>5}  {ok}\n", l.layer, l.cases, l.max_rel_err, l.kinks));
        }
        s
    }
}

type Inputs = Vec<(String, Tensor<f64>)>;
type Build = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> pfs_tensor::Result<Var>>;

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape, lo, hi, rng)
}

fn named(parts: Vec<(&str, Tensor<f64>)>) -> Inputs {
    parts.into_iter().map(|(n, t)| (n.to_string(), t)).collect()
}

/// Contract an output with fixed random weights so every element matters.
fn project(t: &mut Tape<f64>, y: Var, w: &Tensor<f64>) -> pfs_tensor::Result<Var> {
    let w = t.constant(w.clone());
    let p = t.mul(y, w)?;
    t.sum(p)
}

fn layer_case(layer: &str, rng: &mut ChaCha8Rng) -> (Inputs, Build) {
    let c = 2 * rng.random_range(1..=3usize);
    let h = rng.random_range(3..=7usize);
    let w = rng.random_range(3..=7usize);
    let x = uniform(&[c, h, w], -1.0, 1.0, rng);
    // Output weights are drawn lazily from a per-case seed.
    let wseed: u64 = rng.random();
    let weights = move |shape: &[usize]| uniform(shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(wseed));
    let finish = move |t: &mut Tape<f64>, y: Var| {
        let wt = weights(t.shape(y));
        project(t, y, &wt)
    };
    match layer {
        "linear" => {
            let (n, k) = (rng.random_range(1..=6usize), rng.random_range(1..=6usize));
            let inputs = named(vec![
                ("x", uniform(&[c], -1.0, 1.0, rng)),
                ("w", uniform(&[n * k, c], -1.0, 1.0, rng)),
                ("b", uniform(&[n * k], -1.0, 1.0, rng)),
            ]);
            (inputs, Box::new(move |t, v| {
                let y = t.linear(v[0], v[1], Some(v[2]))?;
                finish(t, y)
            }))
        }
        "conv2d" => {
            let c_out = rng.random_range(1..=4usize);
            let stride = rng.random_range(1..=2usize);
            let dilation = rng.random_range(1..=2usize);
            let k = if rng.random_bool(0.5) { 3 } else { 1 };
            let pad = dilation * (k / 2);
            let inputs =
                named(vec![("x", x), ("w", uniform(&[c_out, c, k, k], -1.0, 1.0, rng)), ("b", uniform(&[c_out], -1.0, 1.0, rng))]);
            (inputs, Box::new(move |t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), stride, pad, dilation)?;
                finish(t, y)
            }))
        }
        "conv_transpose2d" => {
            let c_out = rng.random_range(1..=3usize);
            let s = rng.random_range(2..=3usize);
            let crop = (h * s - rng.random_range(0..s), w * s - rng.random_range(0..s));
            let inputs =
                named(vec![("x", x), ("w", uniform(&[c, c_out, s, s], -1.0, 1.0, rng)), ("b", uniform(&[c_out], -1.0, 1.0, rng))]);
            (inputs, Box::new(move |t, v| {
                let y = t.conv_transpose2d(v[0], v[1], Some(v[2]), s, Some(crop))?;
                finish(t, y)
            }))
        }
        "group_norm" => {
            let groups = if rng.random_bool(0.5) { 2 } else { 1 };
            let inputs = named(vec![("x", x), ("gamma", uniform(&[c], 0.5, 1.5, rng)), ("beta", uniform(&[c], -1.0, 1.0, rng))]);
            (inputs, Box::new(move |t, v| {
                let y = t.group_norm(v[0], groups, v[1], v[2], 1e-5)?;
                finish(t, y)
            }))
        }
        "global_avg_pool" => (named(vec![("x", x)]), Box::new(move |t, v| {
            let y = t.global_avg_pool(v[0])?;
            finish(t, y)
        })),
        "channel_affine" => {
            let inputs = named(vec![("x", x), ("gamma", uniform(&[c], -1.0, 1.0, rng)), ("beta", uniform(&[c], -1.0, 1.0, rng))]);
            (inputs, Box::new(move |t, v| {
                let y = t.channel_affine(v[0], v[1], v[2])?;
                finish(t, y)
            }))
        }
        "sigmoid" => (named(vec![("x", uniform(&[c, h, w], -4.0, 4.0, rng))]), Box::new(move |t, v| {
            let y = t.sigmoid(v[0])?;
            finish(t, y)
        })),
        "relu" => (named(vec![("x", x)]), Box::new(move |t, v| {
            let y = t.relu(v[0])?;
            finish(t, y)
        })),
        "clamp" => (named(vec![("x", x)]), Box::new(move |t, v| {
            let y = t.clamp(v[0], -0.5, 0.5)?;
            finish(t, y)
        })),
        "concat_narrow" => {
            let inputs = named(vec![("a", x), ("b", uniform(&[c / 2, h, w], -1.0, 1.0, rng))]);
            (inputs, Box::new(move |t, v| {
                let cat = t.concat(&[v[0], v[1]])?;
                let y = t.narrow(cat, 1, c)?;
                finish(t, y)
            }))
        }
        "mul_spatial" => {
            let inputs = named(vec![("x", x), ("m", uniform(&[1, h, w], -1.0, 1.0, rng))]);
            (inputs, Box::new(move |t, v| {
                let y = t.mul_spatial(v[0], v[1])?;
                finish(t, y)
            }))
        }
        "scale_by" => {
            let inputs = named(vec![("x", x), ("s", uniform(&[1], -1.0, 1.0, rng))]);
            (inputs, Box::new(move |t, v| {
                let y = t.scale_by(v[0], v[1])?;
                finish(t, y)
            }))
        }
        "elementwise" => {
            let inputs = named(vec![("a", x), ("b", uniform(&[c, h, w], -1.0, 1.0, rng))]);
            (inputs, Box::new(move |t, v| {
                let s = t.add(v[0], v[1])?;
                let d = t.sub(v[0], v[1])?;
                let p = t.mul(s, d)?;
                let y = t.affine(p, 0.7, -0.2)?;
                finish(t, y)
            }))
        }
        "reductions" => (named(vec![("x", x)]), Box::new(move |t, v| {
            let r = t.reshape(v[0], &[c * h * w])?;
            let m = t.mean(r)?;
            let y = finish(t, v[0])?;
            let s = t.add(y, m)?;
            t.sum(s)
        })),
        "bce" => {
            let target = uniform(&[c, h, w], 0.0, 1.0, rng);
            (named(vec![("p", uniform(&[c, h, w], 0.05, 0.95, rng))]), Box::new(move |t, v| t.bce(v[0], target.clone(), 1e-6)))
        }
        "focal" => {
            let mut target = uniform(&[c, h, w], 0.0, 0.9, rng);
            let n = target.numel();
            for _ in 0..rng.random_range(1..=3usize) {
                target.data_mut()[rng.random_range(0..n)] = 1.0;
            }
            let fp = FocalParams { alpha: 2.0, beta: 4.0, eps: 1e-6 };
            (named(vec![("p", uniform(&[c, h, w], 0.05, 0.95, rng))]), Box::new(move |t, v| t.focal_loss(v[0], target.clone(), fp)))
        }
        "masked_l1" => {
            let target = uniform(&[c, h, w], -1.0, 1.0, rng);
            let mask: Vec<bool> = (0..c * h * w).map(|_| rng.random_bool(0.4)).collect();
            (named(vec![("pred", x)]), Box::new(move |t, v| t.masked_l1(v[0], target.clone(), mask.clone())))
        }
        other => unreachable!("unknown layer {other}"),
    }
}

pub const LAYERS: [&str; 17] = [
    "linear",
    "conv2d",
    "conv_transpose2d",
    "group_norm",
    "global_avg_pool",
    "channel_affine",
    "sigmoid",
    "relu",
    "clamp",
    "concat_narrow",
    "mul_spatial",
    "scale_by",
    "elementwise",
    "reductions",
    "bce",
    "focal",
    "masked_l1",
];

/// Small stabilizer used by the pipeline check. Output heads use full-size
/// init; with the 0.01 scale Block 2's conv gradients sit near the
/// finite-difference noise floor.
pub fn pipeline_config() -> PfsConfig {
    PfsConfig {
        channels: 16,
        lidar_channels: 8,
        gn_groups: 4,
        rel_hidden: 8,
        expert_hidden: 8,
        gate_weight_scale: 1.0,
        ..PfsConfig::toy()
    }
}

const PIPE_HW: usize = 8;

/// Inputs and graph for stabilizer + frozen head + detection and reliability
/// losses. The checked inputs are the fused and LiDAR features and every
/// stabilizer parameter.
fn pipeline_case(rng: &mut ChaCha8Rng, corrupted: bool) -> Result<(Inputs, Build)> {
    let cfg = pipeline_config();
    let (c, hw) = (cfg.channels, PIPE_HW);
    let mut pfs: ParamStore<f64> = init_pfs(&cfg, rng)?;
    // Move the gates off their near-closed init so every path carries signal.
    pfs.insert("block1/alpha", uniform(&[1], -1.0, 1.0, rng));
    pfs.insert("block3/gate/bias", uniform(&[1], -1.0, 1.0, rng));
    pfs.insert("block2/up/bias", uniform(&[1], -1.0, 1.0, rng));
    // The LiDAR features reach the loss only through Block 2's down/up path,
    // which attenuates about tenfold per layer at the default init. A
    // ReLU-preserving gain keeps their gradients well above roundoff.
    for name in ["block2/conv1/weight", "block2/conv2/weight", "block2/conv3/weight"] {
        let w = pfs.require(name)?.map(|v| 3.0 * v);
        pfs.insert(name, w);
    }
    let host_cfg = HostConfig { channels: c, lidar_channels: cfg.lidar_channels, head_hidden: 4, ..HostConfig::default() };
    let host: ParamStore<f64> = init_host(&host_cfg, rng);
    let k = host_cfg.num_classes;
    let n = hw * hw;
    let mut heat: Vec<f32> = (0..k * n).map(|_| rng.random_range(0.0..0.9)).collect();
    for _ in 0..8 {
        heat[rng.random_range(0..k * n)] = 1.0;
    }
    let targets = DetectionTargets {
        heat,
        reg: (0..6 * n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        reg_mask: (0..6 * n).map(|_| rng.random_bool(0.1)).collect(),
        num_classes: k,
    };
    let rel_target = uniform(&[1, hw, hw], 0.0, 1.0, rng);

    let mut inputs = named(vec![
        ("f_fused", uniform(&[c, hw, hw], -1.0, 1.0, rng)),
        ("f_lidar", uniform(&[cfg.lidar_channels, hw, hw], 0.0, 1.0, rng)),
    ]);
    inputs.extend(pfs.iter().map(|(n, t)| (n.to_string(), t.clone())));
    let names: Vec<String> = inputs.iter().skip(2).map(|(n, _)| n.clone()).collect();
    let loss_cfg = LossConfig::default();
    let build: Build = Box::new(move |t, v| {
        let pp = BoundParams::from_vars(names.iter().cloned().zip(v[2..].iter().copied()));
        let hp = host.bind(t, |_| false);
        let run = |t: &mut Tape<f64>| -> Result<Var> {
            let out = pfs_forward(t, &pp, v[0], Some(v[1]), &cfg, ActiveBlocks::ALL)?;
            let head = detect_head(t, &hp, out.out)?;
            let l_det = detection_loss(t, &head, &targets, &loss_cfg)?;
            let r = out.reliability.expect("block 2 active");
            let l_rel = reliability_loss(t, r, &rel_target, corrupted, !corrupted, 0.2, 1e-6)?;
            total_loss(t, l_det, l_rel, 1.0)
        };
        run(t).map_err(|e| match e {
            crate::error::PfsError::Tensor(te) => te,
            other => pfs_tensor::TensorError::Usage(other.to_string()),
        })
    });
    Ok((inputs, build))
}

fn max_err(inputs: &Inputs, build: &Build, rng: &mut ChaCha8Rng) -> Result<(f64, usize)> {
    let report = check_gradients(inputs, |t, v| build(t, v), STEP, COORDS, rng)?;
    Ok((report.iter().map(|r| r.rel_err).fold(0.0, f64::max), report.iter().map(|r| r.kinks).sum()))
}

/// Run `cases_per_layer` randomized cases of every layer and of the full
/// pipeline. Same seed, same report.
pub fn run_grad_suite(seed: u64, cases_per_layer: usize) -> Result<GradReport> {
    let mut layers = Vec::new();
    for (li, layer) in LAYERS.iter().enumerate() {
        let (mut worst, mut kinks) = (0.0f64, 0);
        for case in 0..cases_per_layer {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_fields(&[seed, li as u64, case as u64]));
            let (inputs, build) = layer_case(layer, &mut rng);
            let (e, k) = max_err(&inputs, &build, &mut rng)?;
            worst = worst.max(e);
            kinks += k;
        }
        layers.push(LayerCheck { layer: layer.to_string(), cases: cases_per_layer, max_rel_err: worst, kinks });
    }
    let (mut worst, mut kinks) = (0.0f64, 0);
    for case in 0..cases_per_layer {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_fields(&[seed, 1000, case as u64]));
        let (inputs, build) = pipeline_case(&mut rng, case % 2 == 0)?;
        let (e, k) = max_err(&inputs, &build, &mut rng)?;
        worst = worst.max(e);
        kinks += k;
    }
    layers.push(LayerCheck { layer: "pfs_pipeline+loss".into(), cases: cases_per_layer, max_rel_err: worst, kinks });
    Ok(GradReport { tolerance: GRAD_TOLERANCE, layers })
}
