//! LiDAR corruptions. The dropping kinds return subsets of the input cloud;
//! miscalibration is a rigid transform.

use std::f32::consts::{PI, TAU};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{BeamReductionParams, MiscalibrationParams, RangeDropoutParams, SectorParams};
use crate::scene::PointCloud;

/// Keep beams whose index is a multiple of `step`.
pub fn beam_reduction(cloud: &PointCloud, params: &BeamReductionParams) -> PointCloud {
    let points = cloud.points.iter().filter(|p| p.beam % params.step == 0).copied().collect();
    PointCloud { points, beam_count: cloud.beam_count }
}

/// Drop probability `p_max * min(r / r_max, 1)` with `r` the 3D range.
pub fn drop_probability(r: f32, params: &RangeDropoutParams) -> f32 {
    params.p_max * (r / params.r_max).min(1.0)
}

pub fn range_dropout(cloud: &PointCloud, params: &RangeDropoutParams, rng: &mut ChaCha8Rng) -> PointCloud {
    let points = cloud
        .points
        .iter()
        .filter(|p| {
            let u: f32 = rng.random();
            u >= drop_probability(p.range(), params)
        })
        .copied()
        .collect();
    PointCloud { points, beam_count: cloud.beam_count }
}

/// Sector centre drawn uniformly in `[0, 2pi)`.
pub fn sector_center(rng: &mut ChaCha8Rng) -> f32 {
    rng.random_range(0.0..TAU)
}

/// Whether azimuth `az` lies in the closed sector of width `theta` around `center`.
pub fn in_sector(az: f32, center: f32, theta: f32) -> bool {
    let d = ((az - center + PI).rem_euclid(TAU) - PI).abs();
    d <= theta / 2.0
}

pub fn sector_dropout(cloud: &PointCloud, params: &SectorParams, rng: &mut ChaCha8Rng) -> PointCloud {
    let center = sector_center(rng);
    let theta = params.theta_deg.to_radians();
    let points = cloud.points.iter().filter(|p| !in_sector(p.azimuth(), center, theta)).copied().collect();
    PointCloud { points, beam_count: cloud.beam_count }
}

/// Seeded rigid perturbation: yaw rotation and horizontal translation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidPerturbation {
    pub yaw: f32,
    pub tx: f32,
    pub ty: f32,
}

pub fn draw_miscalibration(params: &MiscalibrationParams, rng: &mut ChaCha8Rng) -> RigidPerturbation {
    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
    let dir: f32 = rng.random_range(0.0..TAU);
    RigidPerturbation {
        yaw: sign * params.rot_deg.to_radians(),
        tx: params.trans_m * dir.cos(),
        ty: params.trans_m * dir.sin(),
    }
}

pub fn miscalibration(cloud: &PointCloud, params: &MiscalibrationParams, rng: &mut ChaCha8Rng) -> PointCloud {
    let t = draw_miscalibration(params, rng);
    let (s, c) = t.yaw.sin_cos();
    let points = cloud
        .points
        .iter()
        .map(|p| {
            let mut q = *p;
            q.x = c * p.x - s * p.y + t.tx;
            q.y = s * p.x + c * p.y + t.ty;
            q
        })
        .collect();
    PointCloud { points, beam_count: cloud.beam_count }
}
