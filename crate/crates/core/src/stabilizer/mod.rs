//! The three-block stabilizer inserted between fusion and the detection head.
//!
//! Block 1 re-normalises globally drifted statistics, Block 2 predicts a
//! per-cell reliability map and suppresses unreliable cells, Block 3 adds a
//! gated expert residual. Parameters live under `block1/`, `block2/`, `block3/`.

use pfs_tensor::{kaiming_uniform, BoundParams, ParamStore, Scalar, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::PfsConfig;
use crate::error::Result;

/// Framework-default Kaiming slope, bound `1 / sqrt(fan_in)`.
const KAIMING_A: f64 = 2.23606797749979;
/// Total down-sampling of the reliability net (three stride-2 convs).
pub const REL_STRIDE: usize = 8;

pub const BLOCK_PREFIXES: [&str; 3] = ["block1/", "block2/", "block3/"];

pub fn block_of(name: &str) -> Option<u8> {
    BLOCK_PREFIXES.iter().position(|p| name.starts_with(p)).map(|i| i as u8 + 1)
}

fn kaiming_conv<T: Scalar, R: Rng + ?Sized>(
    s: &mut ParamStore<T>,
    name: &str,
    c_out: usize,
    c_in: usize,
    k: usize,
    scale: f64,
    rng: &mut R,
) {
    let w: Tensor<T> = kaiming_uniform(&[c_out, c_in, k, k], c_in * k * k, KAIMING_A, rng);
    s.insert(format!("{name}/weight"), w.map(|v| v * T::lit(scale)));
    s.insert(format!("{name}/bias"), Tensor::zeros(&[c_out]));
}

/// Fresh near-identity parameters.
pub fn init_pfs<T: Scalar, R: Rng + ?Sized>(cfg: &PfsConfig, rng: &mut R) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let c = cfg.channels;
    let mut s = ParamStore::new();

    s.insert("block1/alpha", Tensor::scalar(T::lit(cfg.alpha_init)));
    s.insert("block1/mlp1/weight", kaiming_uniform(&[c / 2, c], c, KAIMING_A, rng));
    s.insert("block1/mlp1/bias", Tensor::zeros(&[c / 2]));
    s.insert("block1/mlp2/weight", kaiming_uniform(&[2 * c, c / 2], c / 2, KAIMING_A, rng));
    s.insert("block1/mlp2/bias", Tensor::zeros(&[2 * c]));
    s.insert("block1/gn/gamma", Tensor::ones(&[c]));
    s.insert("block1/gn/beta", Tensor::zeros(&[c]));

    let h = cfg.rel_hidden;
    kaiming_conv(&mut s, "block2/conv1", h, c + cfg.lidar_channels, 3, 1.0, rng);
    kaiming_conv(&mut s, "block2/conv2", h, h, 3, 1.0, rng);
    kaiming_conv(&mut s, "block2/conv3", h, h, 3, 1.0, rng);
    let fan = h * REL_STRIDE * REL_STRIDE;
    let up: Tensor<T> = kaiming_uniform(&[h, 1, REL_STRIDE, REL_STRIDE], fan, KAIMING_A, rng);
    s.insert("block2/up/weight", up.map(|v| v * T::lit(cfg.gate_weight_scale)));
    s.insert("block2/up/bias", Tensor::full(&[1], T::lit(cfg.rel_bias_init)));

    let e = cfg.expert_hidden;
    kaiming_conv(&mut s, "block3/semantic/conv1", e, c + 1, 3, 1.0, rng);
    kaiming_conv(&mut s, "block3/semantic/conv2", c, e, 3, 1.0, rng);
    kaiming_conv(&mut s, "block3/geometric/conv1", e, c + 1, 3, 1.0, rng);
    kaiming_conv(&mut s, "block3/geometric/conv2", c, e, 3, 1.0, rng);
    kaiming_conv(&mut s, "block3/gate", 1, c + 1, 3, cfg.gate_weight_scale, rng);
    s.insert("block3/gate/bias", Tensor::full(&[1], T::lit(cfg.gate_bias_init)));
    s.insert("block3/w_s", Tensor::scalar(T::lit(cfg.mix_init)));
    s.insert("block3/w_g", Tensor::scalar(T::lit(cfg.mix_init)));
    Ok(s)
}

/// Which blocks run; a disabled block passes its input through.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActiveBlocks {
    pub block1: bool,
    pub block2: bool,
    pub block3: bool,
}

impl ActiveBlocks {
    pub const ALL: ActiveBlocks = ActiveBlocks { block1: true, block2: true, block3: true };
    pub const NONE: ActiveBlocks = ActiveBlocks { block1: false, block2: false, block3: false };

    pub fn from_list(blocks: &[u8]) -> Self {
        ActiveBlocks { block1: blocks.contains(&1), block2: blocks.contains(&2), block3: blocks.contains(&3) }
    }

    pub fn is_active(&self, block: u8) -> bool {
        match block {
            1 => self.block1,
            2 => self.block2,
            3 => self.block3,
            _ => false,
        }
    }
}

fn conv<T: Scalar>(tape: &mut Tape<T>, p: &BoundParams, name: &str, x: Var, stride: usize, dilation: usize) -> Result<Var> {
    let w = p.var(&format!("{name}/weight"))?;
    let b = p.opt(&format!("{name}/bias"));
    let k = tape.shape(w)[2];
    Ok(tape.conv2d(x, w, b, stride, dilation * (k / 2), dilation)?)
}

/// `sigma(a) (gamma * GN(F) + beta) + (1 - sigma(a)) F`, with `(gamma, beta)`
/// predicted from the spatial mean of `F`.
pub fn block1_forward<T: Scalar>(tape: &mut Tape<T>, p: &BoundParams, f: Var, cfg: &PfsConfig) -> Result<Var> {
    let c = cfg.channels;
    let g = tape.global_avg_pool(f)?;
    let h = tape.linear(g, p.var("block1/mlp1/weight")?, Some(p.var("block1/mlp1/bias")?))?;
    let h = tape.relu(h)?;
    let gb = tape.linear(h, p.var("block1/mlp2/weight")?, Some(p.var("block1/mlp2/bias")?))?;
    let gamma = tape.narrow(gb, 0, c)?;
    let beta = tape.narrow(gb, c, c)?;
    let n = tape.group_norm(f, cfg.gn_groups, p.var("block1/gn/gamma")?, p.var("block1/gn/beta")?, T::lit(cfg.gn_eps))?;
    let m = tape.channel_affine(n, gamma, beta)?;
    let s = tape.sigmoid(p.var("block1/alpha")?)?;
    let keep = tape.affine(s, -T::one(), T::one())?;
    let a = tape.scale_by(m, s)?;
    let b = tape.scale_by(f, keep)?;
    Ok(tape.add(a, b)?)
}

/// Reliability map `R [1, H, W]` and `F_clean = R * F_shift`. Without a LiDAR
/// map the shifted features are duplicated as the second input.
pub fn block2_forward<T: Scalar>(
    tape: &mut Tape<T>,
    p: &BoundParams,
    f_shift: Var,
    f_lidar: Option<Var>,
) -> Result<(Var, Var)> {
    let (h, w) = (tape.shape(f_shift)[1], tape.shape(f_shift)[2]);
    let x = tape.concat(&[f_shift, f_lidar.unwrap_or(f_shift)])?;
    let mut y = x;
    for name in ["block2/conv1", "block2/conv2", "block2/conv3"] {
        y = conv(tape, p, name, y, 2, 1)?;
        y = tape.relu(y)?;
    }
    let up = tape.conv_transpose2d(y, p.var("block2/up/weight")?, Some(p.var("block2/up/bias")?), REL_STRIDE, Some((h, w)))?;
    let r = tape.sigmoid(up)?;
    let f_clean = tape.mul_spatial(f_shift, r)?;
    Ok((r, f_clean))
}

#[derive(Clone, Copy, Debug)]
pub struct Block3Output {
    pub delta: Var,
    pub gate: Var,
    pub out: Var,
}

/// `F_shift + G * (w_s E_s([F_clean; R]) + w_g E_g([F_clean; R]))`.
pub fn block3_forward<T: Scalar>(tape: &mut Tape<T>, p: &BoundParams, f_shift: Var, f_clean: Var, r: Var) -> Result<Block3Output> {
    let x = tape.concat(&[f_clean, r])?;
    let s = conv(tape, p, "block3/semantic/conv1", x, 1, 1)?;
    let s = tape.relu(s)?;
    let s = conv(tape, p, "block3/semantic/conv2", s, 1, 1)?;
    let g = conv(tape, p, "block3/geometric/conv1", x, 1, 2)?;
    let g = tape.relu(g)?;
    let g = conv(tape, p, "block3/geometric/conv2", g, 1, 2)?;
    let s = tape.scale_by(s, p.var("block3/w_s")?)?;
    let g = tape.scale_by(g, p.var("block3/w_g")?)?;
    let delta = tape.add(s, g)?;
    let gl = conv(tape, p, "block3/gate", x, 1, 1)?;
    let gate = tape.sigmoid(gl)?;
    let corr = tape.mul_spatial(delta, gate)?;
    let out = tape.add(f_shift, corr)?;
    Ok(Block3Output { delta, gate, out })
}

#[derive(Clone, Copy, Debug)]
pub struct StabilizerOutput {
    pub f_shift: Var,
    pub reliability: Option<Var>,
    pub f_clean: Option<Var>,
    pub block3: Option<Block3Output>,
    /// What the head consumes: the last active block's output.
    pub out: Var,
}

/// Block 1 -> Block 2 -> Block 3 with per-block bypass.
///
/// Disabled blocks pass through: without Block 1, `F_shift = F`; without
/// Block 2 the output chain stops at `F_shift`; Block 3 needs Block 2's map.
pub fn pfs_forward<T: Scalar>(
    tape: &mut Tape<T>,
    p: &BoundParams,
    f_fused: Var,
    f_lidar: Option<Var>,
    cfg: &PfsConfig,
    active: ActiveBlocks,
) -> Result<StabilizerOutput> {
    let f_shift = if active.block1 { block1_forward(tape, p, f_fused, cfg)? } else { f_fused };
    let mut out = StabilizerOutput { f_shift, reliability: None, f_clean: None, block3: None, out: f_shift };
    if !(active.block2 || active.block3) {
        return Ok(out);
    }
    let (r, f_clean) = block2_forward(tape, p, f_shift, f_lidar)?;
    out.reliability = Some(r);
    out.f_clean = Some(f_clean);
    out.out = f_clean;
    if active.block3 {
        let b3 = block3_forward(tape, p, f_shift, f_clean, r)?;
        out.block3 = Some(b3);
        out.out = b3.out;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub block1: usize,
    pub block2: usize,
    pub block3: usize,
    pub total: usize,
}

pub fn count_params<T: Scalar>(p: &ParamStore<T>) -> ParamCounts {
    let b = |i: usize| p.count_prefix(BLOCK_PREFIXES[i]);
    let (b1, b2, b3) = (b(0), b(1), b(2));
    ParamCounts { block1: b1, block2: b2, block3: b3, total: b1 + b2 + b3 }
}

/// Closed-form counts for channel width `C`, LiDAR width `C_l`, reliability
/// hidden width `h` and expert hidden width `e`:
///
/// ```text
/// block1 = C(C/2) + C/2 + (C/2)(2C) + 2C + 2C + 1
/// block2 = 9h(C + C_l) + h + 2(9h^2 + h) + 64h + 1
/// block3 = 2[9e(C + 1) + e + 9Ce + C] + 9(C + 1) + 1 + 2
/// ```
pub fn analytic_counts(cfg: &PfsConfig) -> ParamCounts {
    let (c, cl, h, e) = (cfg.channels, cfg.lidar_channels, cfg.rel_hidden, cfg.expert_hidden);
    let block1 = c * (c / 2) + c / 2 + (c / 2) * (2 * c) + 2 * c + 2 * c + 1;
    let block2 = 9 * h * (c + cl) + h + 2 * (9 * h * h + h) + REL_STRIDE * REL_STRIDE * h + 1;
    let block3 = 2 * (9 * e * (c + 1) + e + 9 * c * e + c) + 9 * (c + 1) + 1 + 2;
    ParamCounts { block1, block2, block3, total: block1 + block2 + block3 }
}
