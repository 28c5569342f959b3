//! Camera and LiDAR corruptions at three severity levels, plus the stochastic
//! training mix. Every draw comes from a seed derived by [`derive_seed`].

pub mod camera;
pub mod lidar;
mod mix;
mod severity;

pub use mix::{sample_corruption_mix, CorruptionMix};
pub use severity::{
    BeamReductionParams, DropoutParams, LowLightParams, MiscalibrationParams, OcclusionParams, RainParams,
    RangeDropoutParams, SectorParams, SeverityTable,
};

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::scene::{CameraImage, PointCloud};
use crate::seeding::{mix_fields, rng_from, stream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CorruptionKind {
    RainLens,
    LowLight,
    Occlusion,
    Dropout,
    BeamReduction,
    RangeDropout,
    SectorDropout,
    Miscalibration,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 8] = [
        CorruptionKind::RainLens,
        CorruptionKind::LowLight,
        CorruptionKind::Occlusion,
        CorruptionKind::Dropout,
        CorruptionKind::BeamReduction,
        CorruptionKind::RangeDropout,
        CorruptionKind::SectorDropout,
        CorruptionKind::Miscalibration,
    ];

    pub fn code(self) -> u64 {
        self as u64 + 1
    }

    pub fn is_camera(self) -> bool {
        matches!(self, Self::RainLens | Self::LowLight | Self::Occlusion | Self::Dropout)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::RainLens => "rain_lens",
            Self::LowLight => "low_light",
            Self::Occlusion => "occlusion",
            Self::Dropout => "dropout",
            Self::BeamReduction => "beam_reduction",
            Self::RangeDropout => "range_dropout",
            Self::SectorDropout => "sector_dropout",
            Self::Miscalibration => "miscalibration",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace(['-', ' '], "_");
        Self::ALL
            .into_iter()
            .find(|k| k.name() == norm || format!("{k:?}").to_ascii_lowercase() == norm)
            .map_or_else(|| config_err(format!("unknown corruption kind {s:?}")), Ok)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub level: u8,
    pub seed: u64,
}

impl CorruptionSpec {
    /// Spec whose seed is derived from the run-wide seed and sample id.
    pub fn derived(kind: CorruptionKind, level: u8, global_seed: u64, sample_id: u64) -> Self {
        CorruptionSpec { kind, level, seed: derive_seed(global_seed, sample_id, kind, level) }
    }
}

/// Per-sample corruption seed; platform-stable splitmix chain over all fields.
pub fn derive_seed(global_seed: u64, sample_id: u64, kind: CorruptionKind, level: u8) -> u64 {
    mix_fields(&[stream::CORRUPTION, global_seed, sample_id, kind.code(), level as u64])
}

pub fn check_level(level: u8) -> Result<usize> {
    if (1..=3).contains(&level) {
        Ok(level as usize - 1)
    } else {
        config_err(format!("severity level {level} outside 1..=3"))
    }
}

/// Apply a camera corruption in place.
pub fn apply_camera(images: &mut [CameraImage], spec: &CorruptionSpec, table: &SeverityTable) -> Result<()> {
    let i = check_level(spec.level)?;
    let mut rng = rng_from(spec.seed);
    match spec.kind {
        CorruptionKind::RainLens => camera::rain(images, &table.rain_lens[i], &mut rng),
        CorruptionKind::LowLight => camera::low_light(images, &table.low_light[i], &mut rng),
        CorruptionKind::Occlusion => camera::occlusion(images, &table.occlusion[i], &mut rng),
        CorruptionKind::Dropout => camera::dropout(images, &table.dropout[i], &mut rng)?,
        other => return config_err(format!("{} is not a camera corruption", other.name())),
    }
    Ok(())
}

/// Apply a LiDAR corruption, returning the new cloud.
pub fn apply_lidar(cloud: &PointCloud, spec: &CorruptionSpec, table: &SeverityTable) -> Result<PointCloud> {
    let i = check_level(spec.level)?;
    let mut rng = rng_from(spec.seed);
    Ok(match spec.kind {
        CorruptionKind::BeamReduction => lidar::beam_reduction(cloud, &table.beam_reduction[i]),
        CorruptionKind::RangeDropout => lidar::range_dropout(cloud, &table.range_dropout[i], &mut rng),
        CorruptionKind::SectorDropout => lidar::sector_dropout(cloud, &table.sector_dropout[i], &mut rng),
        CorruptionKind::Miscalibration => lidar::miscalibration(cloud, &table.miscalibration[i], &mut rng),
        other => return config_err(format!("{} is not a LiDAR corruption", other.name())),
    })
}

/// Sensor inputs of one frame after corruption.
#[derive(Clone, Debug, PartialEq)]
pub struct CorruptedInputs {
    pub images: Vec<CameraImage>,
    pub cloud: PointCloud,
}

/// Apply any combination of one camera and one LiDAR corruption.
pub fn corrupt_inputs(
    images: &[CameraImage],
    cloud: &PointCloud,
    specs: &[CorruptionSpec],
    table: &SeverityTable,
) -> Result<CorruptedInputs> {
    let mut images = images.to_vec();
    let mut cloud = cloud.clone();
    for spec in specs {
        if spec.kind.is_camera() {
            apply_camera(&mut images, spec, table)?;
        } else {
            cloud = apply_lidar(&cloud, spec, table)?;
        }
    }
    Ok(CorruptedInputs { images, cloud })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds_are_stable_and_distinct() {
        let a = derive_seed(7, 100, CorruptionKind::LowLight, 3);
        assert_eq!(a, derive_seed(7, 100, CorruptionKind::LowLight, 3));
        let mut all = std::collections::BTreeSet::new();
        for sample in 0..50u64 {
            for k in CorruptionKind::ALL {
                for lvl in 1..=3 {
                    assert!(all.insert(derive_seed(7, sample, k, lvl)));
                }
            }
        }
    }

    #[test]
    fn one_bit_flip_avalanches() {
        let mut total = 0u32;
        for i in 0..1000u64 {
            let id = i.wrapping_mul(0x9E37_79B9);
            let bit = 1u64 << (i % 64);
            let a = derive_seed(3, id, CorruptionKind::Dropout, 2);
            let b = derive_seed(3, id ^ bit, CorruptionKind::Dropout, 2);
            assert_ne!(a, b);
            total += (a ^ b).count_ones();
        }
        let mean_fraction = total as f64 / 1000.0 / 64.0;
        assert!(mean_fraction >= 0.30, "{mean_fraction}");
    }

    #[test]
    fn kind_names_round_trip() {
        for k in CorruptionKind::ALL {
            assert_eq!(CorruptionKind::parse(k.name()).unwrap(), k);
        }
        assert_eq!(CorruptionKind::parse("BeamReduction").unwrap(), CorruptionKind::BeamReduction);
        assert!(CorruptionKind::parse("fog").unwrap_err().is_config());
    }

    #[test]
    fn level_outside_range_rejected() {
        let table = SeverityTable::builtin();
        let mut imgs = vec![CameraImage::zeros(0, 4, 4)];
        let spec = CorruptionSpec { kind: CorruptionKind::LowLight, level: 4, seed: 0 };
        assert!(apply_camera(&mut imgs, &spec, &table).unwrap_err().is_config());
    }
}
