//! Learned part of the toy detector: two encoders, the fuser and the head.

use pfs_tensor::{kaiming_uniform, BoundParams, ParamStore, Scalar, Tape, Tensor, Var};
use rand::Rng;

use super::inputs::{CAMERA_FEATURES, LIDAR_STATS};
use crate::config::HostConfig;
use crate::error::Result;

pub const PREFIX: &str = "host/";
/// `dx, dy, ln l, ln w, sin yaw, cos yaw`.
pub const REG_CHANNELS: usize = 6;
/// Initial heatmap logit, `sigmoid(-2.19) ~ 0.1`.
pub const HEAT_BIAS: f64 = -2.19;

fn conv<T: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    name: &str,
    c_out: usize,
    c_in: usize,
    k: usize,
    bias: bool,
    rng: &mut R,
) {
    let fan_in = c_in * k * k;
    store.insert(format!("{name}/weight"), kaiming_uniform(&[c_out, c_in, k, k], fan_in, 0.0, rng));
    if bias {
        store.insert(format!("{name}/bias"), Tensor::zeros(&[c_out]));
    }
}

pub fn init_host<T: Scalar, R: Rng + ?Sized>(cfg: &HostConfig, rng: &mut R) -> ParamStore<T> {
    let mut s = ParamStore::new();
    let h = cfg.encoder_hidden;
    // Camera path has no biases so a blacked-out camera contributes exactly zero.
    conv(&mut s, "host/cam/conv1", h, CAMERA_FEATURES, 3, false, rng);
    conv(&mut s, "host/cam/conv2", cfg.camera_channels, h, 3, false, rng);
    conv(&mut s, "host/lidar/conv1", h, LIDAR_STATS, 3, true, rng);
    conv(&mut s, "host/lidar/conv2", cfg.lidar_channels, h, 3, true, rng);
    conv(&mut s, "host/fuse", cfg.channels, cfg.camera_channels + cfg.lidar_channels, 1, true, rng);
    conv(&mut s, "host/head/heat1", cfg.head_hidden, cfg.channels, 3, true, rng);
    conv(&mut s, "host/head/heat2", cfg.num_classes, cfg.head_hidden, 1, true, rng);
    conv(&mut s, "host/head/reg1", cfg.head_hidden, cfg.channels, 3, true, rng);
    conv(&mut s, "host/head/reg2", REG_CHANNELS, cfg.head_hidden, 1, true, rng);
    s.insert("host/head/heat2/bias", Tensor::full(&[cfg.num_classes], T::lit(HEAT_BIAS)));
    s
}

fn apply_conv<T: Scalar>(tape: &mut Tape<T>, p: &BoundParams, name: &str, x: Var) -> Result<Var> {
    let w = p.var(&format!("{name}/weight"))?;
    let b = p.opt(&format!("{name}/bias"));
    let pad = tape.shape(w)[2] / 2;
    Ok(tape.conv2d(x, w, b, 1, pad, 1)?)
}

fn conv_relu<T: Scalar>(tape: &mut Tape<T>, p: &BoundParams, name: &str, x: Var) -> Result<Var> {
    let y = apply_conv(tape, p, name, x)?;
    Ok(tape.relu(y)?)
}

/// `[4, H, W]` statistics to `F_lidar`.
pub fn encode_lidar<T: Scalar>(tape: &mut Tape<T>, p: &BoundParams, stats: Var) -> Result<Var> {
    let h = conv_relu(tape, p, "host/lidar/conv1", stats)?;
    conv_relu(tape, p, "host/lidar/conv2", h)
}

/// `[6, H, W]` splatted camera features to the camera BEV map.
pub fn encode_camera<T: Scalar>(tape: &mut Tape<T>, p: &BoundParams, splat: Var) -> Result<Var> {
    let h = conv_relu(tape, p, "host/cam/conv1", splat)?;
    conv_relu(tape, p, "host/cam/conv2", h)
}

/// Channel concatenation and a 1x1 projection to the host width.
pub fn fuse<T: Scalar>(tape: &mut Tape<T>, p: &BoundParams, cam: Var, lidar: Var) -> Result<Var> {
    let cat = tape.concat(&[cam, lidar])?;
    apply_conv(tape, p, "host/fuse", cat)
}

#[derive(Clone, Copy, Debug)]
pub struct HostFeatures {
    pub fused: Var,
    pub lidar: Var,
}

pub fn encode<T: Scalar>(tape: &mut Tape<T>, p: &BoundParams, lidar_in: Var, camera_in: Var) -> Result<HostFeatures> {
    let lidar = encode_lidar(tape, p, lidar_in)?;
    let cam = encode_camera(tape, p, camera_in)?;
    let fused = fuse(tape, p, cam, lidar)?;
    Ok(HostFeatures { fused, lidar })
}

#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    /// Sigmoid heatmap `[K, H, W]`.
    pub heat: Var,
    pub reg: Var,
}

pub fn detect_head<T: Scalar>(tape: &mut Tape<T>, p: &BoundParams, f: Var) -> Result<HeadOutput> {
    let h = conv_relu(tape, p, "host/head/heat1", f)?;
    let logits = apply_conv(tape, p, "host/head/heat2", h)?;
    let heat = tape.sigmoid(logits)?;
    let r = conv_relu(tape, p, "host/head/reg1", f)?;
    let reg = apply_conv(tape, p, "host/head/reg2", r)?;
    Ok(HeadOutput { heat, reg })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::rng_from;
    use pfs_tensor::sigmoid;

    #[test]
    fn zero_input_heat_is_sigmoid_of_bias() {
        let cfg = HostConfig::default();
        let params: ParamStore<f32> = init_host(&cfg, &mut rng_from(1));
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, |_| false);
        let f = tape.constant(Tensor::zeros(&[cfg.channels, 6, 6]));
        let out = detect_head(&mut tape, &p, f).unwrap();
        let want = sigmoid(HEAT_BIAS as f32);
        assert!(tape.value(out.heat).data().iter().all(|&v| (v - want).abs() < 1e-6));
    }

    #[test]
    fn fuse_shapes_and_bias_only_on_zero() {
        let cfg = HostConfig { camera_channels: 5, lidar_channels: 7, channels: 4, ..HostConfig::default() };
        let mut params: ParamStore<f64> = init_host(&cfg, &mut rng_from(2));
        params.insert("host/fuse/bias", Tensor::from_vec(&[4], vec![0.1, -0.2, 0.3, 0.4]).unwrap());
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, |_| false);
        let cam = tape.constant(Tensor::zeros(&[5, 3, 4]));
        let lid = tape.constant(Tensor::zeros(&[7, 3, 4]));
        let y = fuse(&mut tape, &p, cam, lid).unwrap();
        assert_eq!(tape.shape(y), &[4, 3, 4]);
        let d = tape.value(y).data();
        for c in 0..4 {
            assert!(d[c * 12..(c + 1) * 12].iter().all(|&v| v == [0.1, -0.2, 0.3, 0.4][c]));
        }
    }

    #[test]
    fn blank_camera_gives_zero_camera_features() {
        let cfg = HostConfig::default();
        let params: ParamStore<f32> = init_host(&cfg, &mut rng_from(3));
        let mut tape = Tape::new();
        let p = params.bind(&mut tape, |_| false);
        let x = tape.constant(Tensor::zeros(&[CAMERA_FEATURES, 8, 8]));
        let y = encode_camera(&mut tape, &p, x).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }
}
