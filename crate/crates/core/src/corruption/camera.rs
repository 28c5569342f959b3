//! Camera corruptions. All map `[0, 1]` pixels to `[0, 1]` pixels.

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{DropoutParams, LowLightParams, OcclusionParams, RainParams};
use crate::error::{config_err, Result};
use crate::scene::CameraImage;

/// Gray level the lens haze blends toward.
pub const HAZE_GRAY: f32 = 0.75;
const DROP_RADIUS: (f32, f32) = (2.0, 8.0);
const DROP_STRENGTH: (f32, f32) = (0.05, 0.25);
const SMEAR_STRENGTH: f32 = 0.12;

/// Global haze blend `(1 - a) I + a * HAZE_GRAY`.
pub fn haze(images: &mut [CameraImage], alpha: f32) {
    for img in images {
        for p in &mut img.pixels {
            *p = (1.0 - alpha) * *p + alpha * HAZE_GRAY;
        }
    }
}

/// Haze, then droplets spread over all views, then vertical smears.
pub fn rain(images: &mut [CameraImage], params: &RainParams, rng: &mut ChaCha8Rng) {
    haze(images, params.haze);
    if images.is_empty() {
        return;
    }
    for _ in 0..params.drops {
        let v = rng.random_range(0..images.len());
        let img = &mut images[v];
        let cy = rng.random_range(0.0..img.h as f32);
        let cx = rng.random_range(0.0..img.w as f32);
        let r = rng.random_range(DROP_RADIUS.0..DROP_RADIUS.1);
        let s = rng.random_range(DROP_STRENGTH.0..DROP_STRENGTH.1);
        let (r0, r1) = ((cy - r).floor().max(0.0) as usize, ((cy + r).ceil() as usize).min(img.h));
        let (c0, c1) = ((cx - r).floor().max(0.0) as usize, ((cx + r).ceil() as usize).min(img.w));
        for row in r0..r1 {
            for col in c0..c1 {
                let d2 = ((row as f32 + 0.5 - cy).powi(2) + (col as f32 + 0.5 - cx).powi(2)) / (r * r);
                if d2 < 1.0 {
                    let gain = s * (1.0 - d2);
                    for c in 0..3 {
                        let v = img.at(c, row, col);
                        img.set(c, row, col, v + gain);
                    }
                }
            }
        }
    }
    for _ in 0..params.drops / 10 {
        let v = rng.random_range(0..images.len());
        let img = &mut images[v];
        let col = rng.random_range(0..img.w);
        let start = rng.random_range(0..img.h);
        let len = rng.random_range(img.h / 8..=img.h / 2).max(1);
        for k in 0..len.min(img.h - start) {
            let gain = SMEAR_STRENGTH * (1.0 - k as f32 / len as f32);
            for c in 0..3 {
                let v = img.at(c, start + k, col);
                img.set(c, start + k, col, v + gain);
            }
        }
    }
    clamp_all(images);
}

/// `clamp(I^g + n * sqrt(I^g + 1e-4), 0, 1)` with `n ~ N(0, s^2)`.
pub fn low_light(images: &mut [CameraImage], params: &LowLightParams, rng: &mut ChaCha8Rng) {
    let noise = Normal::new(0.0f32, params.sigma.max(0.0)).unwrap();
    for img in images {
        for p in &mut img.pixels {
            let dark = p.powf(params.gamma);
            let n = if params.sigma > 0.0 { noise.sample(rng) } else { 0.0 };
            *p = (dark + n * (dark + 1e-4).sqrt()).clamp(0.0, 1.0);
        }
    }
}

/// One opaque zero-filled rectangle per view covering `area` of its pixels
/// (within 1%), centre row biased toward mid-height.
pub fn occlusion(images: &mut [CameraImage], params: &OcclusionParams, rng: &mut ChaCha8Rng) {
    if params.area <= 0.0 {
        return;
    }
    for img in images {
        let Some((h, w)) = occluder_size(img.h, img.w, params.area, rng) else { continue };
        let mid = img.h as f32 / 2.0;
        let row_dist = Normal::new(mid, img.h as f32 / 8.0).unwrap();
        let cy: f32 = row_dist.sample(rng);
        let top = (cy - h as f32 / 2.0).round().clamp(0.0, (img.h - h) as f32) as usize;
        let left = rng.random_range(0..=img.w - w);
        for c in 0..3 {
            for row in top..top + h {
                for col in left..left + w {
                    img.set(c, row, col, 0.0);
                }
            }
        }
    }
}

/// Seeded choice among rectangle sizes whose area is within 1% of the image
/// of the target; falls back to the closest size when none qualifies.
fn occluder_size(ih: usize, iw: usize, frac: f32, rng: &mut ChaCha8Rng) -> Option<(usize, usize)> {
    let total = (ih * iw) as f32;
    let target = frac * total;
    let mut good = Vec::new();
    let mut best: Option<(f32, usize, usize)> = None;
    for h in 1..=ih {
        let w = (target / h as f32).round() as usize;
        if w == 0 || w > iw {
            continue;
        }
        let err = ((h * w) as f32 - target).abs();
        if err <= 0.01 * total {
            good.push((h, w));
        }
        if best.is_none_or(|(e, _, _)| err < e) {
            best = Some((err, h, w));
        }
    }
    if good.is_empty() {
        best.map(|(_, h, w)| (h, w))
    } else {
        Some(good[rng.random_range(0..good.len())])
    }
}

/// Zero `views` distinct seeded views.
pub fn dropout(images: &mut [CameraImage], params: &DropoutParams, rng: &mut ChaCha8Rng) -> Result<()> {
    if params.views > images.len() {
        return config_err(format!("cannot drop {} of {} views", params.views, images.len()));
    }
    for v in sample(rng, images.len(), params.views) {
        images[v].pixels.fill(0.0);
    }
    Ok(())
}

fn clamp_all(images: &mut [CameraImage]) {
    for img in images {
        for p in &mut img.pixels {
            *p = p.clamp(0.0, 1.0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::rng_from;

    fn constant(v: f32, n: usize) -> Vec<CameraImage> {
        (0..n).map(|i| CameraImage { view: i, h: 32, w: 64, pixels: vec![v; 3 * 32 * 64] }).collect()
    }

    fn noisy(n: usize, seed: u64) -> Vec<CameraImage> {
        let mut rng = rng_from(seed);
        (0..n)
            .map(|i| CameraImage { view: i, h: 32, w: 64, pixels: (0..3 * 32 * 64).map(|_| rng.random()).collect() })
            .collect()
    }

    #[test]
    fn identity_parameters() {
        let orig = noisy(2, 1);
        let mut a = orig.clone();
        rain(&mut a, &RainParams { haze: 0.0, drops: 0 }, &mut rng_from(0));
        assert_eq!(a, orig);
        low_light(&mut a, &LowLightParams { gamma: 1.0, sigma: 0.0 }, &mut rng_from(0));
        assert_eq!(a, orig);
        occlusion(&mut a, &OcclusionParams { area: 0.0 }, &mut rng_from(0));
        assert_eq!(a, orig);
        dropout(&mut a, &DropoutParams { views: 0 }, &mut rng_from(0)).unwrap();
        assert_eq!(a, orig);
    }

    #[test]
    fn haze_moves_mean_toward_gray() {
        let mut imgs = constant(0.2, 6);
        haze(&mut imgs, 0.70);
        let mean: f32 = imgs.iter().flat_map(|i| &i.pixels).sum::<f32>() / (6 * 3 * 32 * 64) as f32;
        assert!(mean - 0.2 >= 0.70 * (HAZE_GRAY - 0.2) - 1e-5);
    }

    #[test]
    fn rain_stays_in_range() {
        let mut imgs = noisy(6, 2);
        rain(&mut imgs, &RainParams { haze: 0.7, drops: 350 }, &mut rng_from(3));
        assert!(imgs.iter().flat_map(|i| &i.pixels).all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn low_light_mean_at_level_three() {
        let mut imgs = constant(0.5, 1);
        low_light(&mut imgs, &LowLightParams { gamma: 5.5, sigma: 0.0 }, &mut rng_from(0));
        assert!((imgs[0].pixels[0] - 0.5f32.powf(5.5)).abs() < 1e-6);
        assert!((0.5f32.powf(5.5) - 0.02210).abs() < 1e-5);
    }

    #[test]
    fn occlusion_fraction_and_opacity() {
        for (lvl, frac) in [0.15f32, 0.35, 0.60].into_iter().enumerate() {
            let mut imgs = constant(0.5, 6);
            occlusion(&mut imgs, &OcclusionParams { area: frac }, &mut rng_from(lvl as u64));
            for img in &imgs {
                let zeros = img.pixels.iter().filter(|&&v| v == 0.0).count() as f32 / img.pixels.len() as f32;
                assert!((zeros - frac).abs() <= 0.01, "{zeros} vs {frac}");
            }
        }
    }

    #[test]
    fn dropout_counts() {
        let orig = noisy(6, 5);
        let mut a = orig.clone();
        dropout(&mut a, &DropoutParams { views: 1 }, &mut rng_from(9)).unwrap();
        let zero = a.iter().filter(|i| i.pixels.iter().all(|&v| v == 0.0)).count();
        let same = a.iter().zip(&orig).filter(|(x, y)| x == y).count();
        assert_eq!((zero, same), (1, 5));
        let mut b = orig.clone();
        dropout(&mut b, &DropoutParams { views: 6 }, &mut rng_from(9)).unwrap();
        assert!(b.iter().all(|i| i.pixels.iter().all(|&v| v == 0.0)));
        assert!(dropout(&mut b, &DropoutParams { views: 7 }, &mut rng_from(9)).unwrap_err().is_config());
    }
}
