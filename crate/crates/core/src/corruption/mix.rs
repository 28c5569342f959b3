use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CorruptionKind, CorruptionSpec};
use crate::error::{config_err, Result};

/// Independently drawn camera and LiDAR corruption for one training sample.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionMix {
    pub camera: Option<CorruptionSpec>,
    pub lidar: Option<CorruptionSpec>,
}

impl CorruptionMix {
    pub fn specs(&self) -> Vec<CorruptionSpec> {
        self.camera.into_iter().chain(self.lidar).collect()
    }

    pub fn is_clean(&self) -> bool {
        self.camera.is_none() && self.lidar.is_none()
    }
}

/// Each modality is corrupted with probability `p`; the kind is uniform over
/// the pool's kinds for that modality and the level uniform over 1..=3.
///
/// A modality whose share of the pool is empty is never corrupted.
pub fn sample_corruption_mix(rng: &mut ChaCha8Rng, p: f64, pool: &[CorruptionKind]) -> Result<CorruptionMix> {
    if !(0.0..=1.0).contains(&p) {
        return config_err(format!("corruption probability {p} outside [0, 1]"));
    }
    if pool.is_empty() && p > 0.0 {
        return config_err("empty corruption pool with nonzero probability");
    }
    let cams: Vec<_> = pool.iter().copied().filter(|k| k.is_camera()).collect();
    let lids: Vec<_> = pool.iter().copied().filter(|k| !k.is_camera()).collect();
    let draw = |kinds: &[CorruptionKind], rng: &mut ChaCha8Rng| -> Option<CorruptionSpec> {
        let hit = rng.random::<f64>() < p;
        let kind_ix = rng.random_range(0..kinds.len().max(1));
        let level = rng.random_range(1..=3u8);
        let seed = rng.random::<u64>();
        (hit && !kinds.is_empty()).then(|| CorruptionSpec { kind: kinds[kind_ix], level, seed })
    };
    let camera = draw(&cams, rng);
    let lidar = draw(&lids, rng);
    Ok(CorruptionMix { camera, lidar })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::rng_from;

    #[test]
    fn zero_probability_is_always_clean() {
        let mut rng = rng_from(1);
        for _ in 0..1000 {
            assert!(sample_corruption_mix(&mut rng, 0.0, &CorruptionKind::ALL).unwrap().is_clean());
        }
    }

    #[test]
    fn empty_pool_rejected() {
        assert!(sample_corruption_mix(&mut rng_from(0), 0.3, &[]).unwrap_err().is_config());
        assert!(sample_corruption_mix(&mut rng_from(0), 0.0, &[]).unwrap().is_clean());
    }

    #[test]
    fn same_seed_same_sequence() {
        let seq = |s| {
            let mut rng = rng_from(s);
            (0..100).map(|_| sample_corruption_mix(&mut rng, 0.3, &CorruptionKind::ALL).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(seq(4), seq(4));
    }

    #[test]
    fn drawn_kinds_respect_modality() {
        let mut rng = rng_from(2);
        for _ in 0..1000 {
            let m = sample_corruption_mix(&mut rng, 0.5, &CorruptionKind::ALL).unwrap();
            assert!(m.camera.is_none_or(|s| s.kind.is_camera() && (1..=3).contains(&s.level)));
            assert!(m.lidar.is_none_or(|s| !s.kind.is_camera() && (1..=3).contains(&s.level)));
        }
    }
}
