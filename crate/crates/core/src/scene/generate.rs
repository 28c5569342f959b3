use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::raycast::{cast, Hit};
use super::{BoxHit, CameraImage, CameraRig, GroundBox, LidarPoint, PointCloud, SceneSample, Weather, CLASSES};
use crate::config::SceneConfig;
use crate::error::{PfsError, Result};
use crate::seeding::{rng_from, scene_seed};

const PLACEMENT_TRIES: usize = 64;
const BOX_MARGIN: f32 = 0.5;
const RANGE_NOISE: f32 = 0.02;
const PIXEL_NOISE: f32 = 0.01;

/// Deterministic scene for `(dataset_seed, sample_id)`.
pub fn generate_scene(dataset_seed: u64, sample_id: u64, cfg: &SceneConfig) -> Result<SceneSample> {
    cfg.validate()?;
    let mut rng = rng_from(scene_seed(dataset_seed, sample_id));
    for _ in 0..cfg.max_scene_attempts {
        let Some(boxes) = place_boxes(&mut rng, cfg) else { continue };
        let (cloud, lidar_hits) = sense_lidar(&boxes, cfg, &mut rng);
        let (images, camera_hits) = sense_camera(&boxes, cfg, &mut rng);
        if lidar_hits.iter().zip(&camera_hits).all(|(&l, &c)| l > 0 && c > 0) {
            return Ok(SceneSample { sample_id, boxes, cloud, images, weather: Weather::Clean });
        }
    }
    Err(PfsError::Generation(format!(
        "sample {sample_id}: no valid layout after {} attempts",
        cfg.max_scene_attempts
    )))
}

fn place_boxes(rng: &mut ChaCha8Rng, cfg: &SceneConfig) -> Option<Vec<GroundBox>> {
    let n = rng.random_range(cfg.min_boxes..=cfg.max_boxes);
    let hw = cfg.placement_half_width;
    let mut boxes: Vec<GroundBox> = Vec::with_capacity(n);
    for _ in 0..n {
        let mut placed = false;
        for _ in 0..PLACEMENT_TRIES {
            let class_id = rng.random_range(0..CLASSES.len());
            let spec = &CLASSES[class_id];
            let cand = GroundBox {
                center: [rng.random_range(-hw..hw), rng.random_range(-hw..hw)],
                size: [spec.length * rng.random_range(0.9..1.1), spec.width * rng.random_range(0.9..1.1)],
                yaw: rng.random_range(-std::f32::consts::PI..std::f32::consts::PI),
                class_id,
            };
            if cand.distance_to([0.0, 0.0]) < cfg.min_ego_distance {
                continue;
            }
            if boxes.iter().any(|b| overlaps(b, &cand, BOX_MARGIN)) {
                continue;
            }
            boxes.push(cand);
            placed = true;
            break;
        }
        if !placed {
            return None;
        }
    }
    Some(boxes)
}

/// Separating-axis test on footprints grown by `margin`.
pub(crate) fn overlaps(a: &GroundBox, b: &GroundBox, margin: f32) -> bool {
    let ca = a.corners();
    let cb = b.corners();
    let axes = [a.yaw, a.yaw + std::f32::consts::FRAC_PI_2, b.yaw, b.yaw + std::f32::consts::FRAC_PI_2];
    for ang in axes {
        let (s, c) = ang.sin_cos();
        let proj = |pts: &[[f32; 2]; 4]| {
            pts.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), p| {
                let v = p[0] * c + p[1] * s;
                (lo.min(v), hi.max(v))
            })
        };
        let (alo, ahi) = proj(&ca);
        let (blo, bhi) = proj(&cb);
        if ahi + margin < blo || bhi + margin < alo {
            return false;
        }
    }
    true
}

fn sense_lidar(boxes: &[GroundBox], cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> (PointCloud, Vec<usize>) {
    let noise = Normal::new(0.0f32, RANGE_NOISE).unwrap();
    let mut cloud = PointCloud::new(cfg.beams as u32);
    let mut hits = vec![0usize; boxes.len()];
    let n_az = (360.0 / cfg.azimuth_step_deg).round() as usize;
    let span = cfg.elevation_max_deg - cfg.elevation_min_deg;
    for beam in 0..cfg.beams {
        let frac = if cfg.beams > 1 { beam as f32 / (cfg.beams - 1) as f32 } else { 0.5 };
        let elev = (cfg.elevation_min_deg + frac * span).to_radians();
        let (se, ce) = elev.sin_cos();
        for k in 0..n_az {
            let phi = (k as f32 * cfg.azimuth_step_deg).to_radians();
            let (dist, refl) = match cast(boxes, cfg.lidar_height, phi, elev, cfg.max_range * ce) {
                Hit::Object { index, dist, .. } => {
                    hits[index] += 1;
                    (dist, CLASSES[boxes[index].class_id].reflectivity)
                }
                Hit::Ground { dist } => (dist, 0.15),
                Hit::Nothing => continue,
            };
            let r = dist / ce + noise.sample(rng);
            let intensity = (refl * (1.0 - 0.3 * r / cfg.max_range) + 0.5 * noise.sample(rng)).clamp(0.0, 1.0);
            cloud.points.push(LidarPoint {
                x: r * ce * phi.cos(),
                y: r * ce * phi.sin(),
                z: cfg.lidar_height + r * se,
                intensity,
                beam: beam as u32,
            });
        }
    }
    (cloud, hits)
}

const SKY_HORIZON: [f32; 3] = [0.70, 0.78, 0.90];
const SKY_ZENITH: [f32; 3] = [0.45, 0.58, 0.85];
const GROUND: [f32; 3] = [0.36, 0.34, 0.31];

fn sense_camera(boxes: &[GroundBox], cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> (Vec<CameraImage>, Vec<usize>) {
    let rig = CameraRig::from_config(cfg);
    let noise = Normal::new(0.0f32, PIXEL_NOISE).unwrap();
    let mut hits = vec![0usize; boxes.len()];
    let mut images = Vec::with_capacity(rig.n_views);
    for v in 0..rig.n_views {
        let mut img = CameraImage::zeros(v, rig.h, rig.w);
        for col in 0..rig.w {
            let phi = rig.column_azimuth(v, col);
            for row in 0..rig.h {
                let elev = rig.row_elevation(row);
                let rgb = match cast(boxes, rig.height, phi, elev, 200.0) {
                    Hit::Object { index, face, .. } => {
                        hits[index] += 1;
                        let shade = match face {
                            BoxHit::Side(true) => 1.0,
                            BoxHit::Side(false) => 0.8,
                            BoxHit::Top => 0.9,
                        };
                        CLASSES[boxes[index].class_id].albedo.map(|a| a * shade)
                    }
                    Hit::Ground { dist } => {
                        let f = 0.85 + 0.15 * (dist / 40.0).min(1.0);
                        GROUND.map(|g| g * f)
                    }
                    Hit::Nothing => {
                        let t = (elev / rig.top_rad).clamp(0.0, 1.0);
                        std::array::from_fn(|c| SKY_HORIZON[c] + t * (SKY_ZENITH[c] - SKY_HORIZON[c]))
                    }
                };
                for (c, val) in rgb.iter().enumerate() {
                    img.set(c, row, col, (val + noise.sample(rng)).clamp(0.0, 1.0));
                }
            }
        }
        images.push(img);
    }
    (images, hits)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_scene() {
        let cfg = SceneConfig::default();
        let a = generate_scene(3, 17, &cfg).unwrap();
        let b = generate_scene(3, 17, &cfg).unwrap();
        assert_eq!(a, b);
        let c = generate_scene(3, 18, &cfg).unwrap();
        assert_ne!(a.boxes, c.boxes);
    }

    #[test]
    fn empty_scene_has_only_ground() {
        let cfg = SceneConfig { min_boxes: 0, max_boxes: 0, ..SceneConfig::default() };
        let s = generate_scene(1, 0, &cfg).unwrap();
        assert!(s.boxes.is_empty());
        assert!(!s.cloud.is_empty());
        assert!(s.cloud.points.iter().all(|p| p.z.abs() < 0.2));
    }

    #[test]
    fn default_scenes_are_valid() {
        let cfg = SceneConfig::default();
        for id in 0..20 {
            let s = generate_scene(5, id, &cfg).unwrap();
            assert!((cfg.min_boxes..=cfg.max_boxes).contains(&s.boxes.len()));
            assert_eq!(s.images.len(), cfg.n_views);
            for b in &s.boxes {
                assert!(cfg.extent.contains(b.center[0], b.center[1]));
                assert!(b.size[0] > 0.0 && b.size[1] > 0.0);
                assert!((-std::f32::consts::PI..std::f32::consts::PI).contains(&b.yaw));
            }
            for (i, a) in s.boxes.iter().enumerate() {
                for b in &s.boxes[i + 1..] {
                    assert!(!overlaps(a, b, 0.0));
                }
            }
            for p in &s.cloud.points {
                assert!(p.beam < 32 && (0.0..=1.0).contains(&p.intensity));
            }
            for img in &s.images {
                assert!(img.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn impossible_layout_is_a_generation_error() {
        let cfg = SceneConfig { min_boxes: 400, max_boxes: 400, placement_half_width: 10.0, max_scene_attempts: 2, ..SceneConfig::default() };
        assert!(matches!(generate_scene(1, 0, &cfg), Err(PfsError::Generation(_))));
    }
}
