//! Non-learned front end: pillar statistics and camera-to-BEV splatting.

use pfs_tensor::{Scalar, Tensor};

use crate::config::SceneConfig;
use crate::geometry::BevExtent;
use crate::scene::{CameraImage, CameraRig, PointCloud};

pub const LIDAR_STATS: usize = 4;
pub const CAMERA_FEATURES: usize = 6;

/// Per-cell `[count, mean z, max z, mean intensity]`, shape `[4, rows, cols]`.
/// Empty cells are all zero.
pub fn lidar_statistics(cloud: &PointCloud, extent: &BevExtent) -> Vec<f32> {
    let n = extent.num_cells();
    let mut out = vec![0.0f32; LIDAR_STATS * n];
    let mut max_z = vec![f32::NEG_INFINITY; n];
    for p in &cloud.points {
        let Some((r, c)) = extent.cell_of(p.x, p.y) else { continue };
        let i = r * extent.cols + c;
        out[i] += 1.0;
        out[n + i] += p.z;
        max_z[i] = max_z[i].max(p.z);
        out[3 * n + i] += p.intensity;
    }
    for i in 0..n {
        let cnt = out[i];
        if cnt > 0.0 {
            out[n + i] /= cnt;
            out[2 * n + i] = max_z[i];
            out[3 * n + i] /= cnt;
        }
    }
    out
}

/// Statistics as the LiDAR encoder consumes them: the count channel is
/// compressed with `ln(1 + count)`.
pub fn lidar_input<T: Scalar>(cloud: &PointCloud, extent: &BevExtent) -> Tensor<T> {
    let mut stats = lidar_statistics(cloud, extent);
    for v in &mut stats[..extent.num_cells()] {
        *v = v.ln_1p();
    }
    Tensor::from_vec(&[LIDAR_STATS, extent.rows, extent.cols], stats.into_iter().map(|v| T::lit(v as f64)).collect())
        .expect("statistics shape")
}

/// Where each BEV cell samples the camera images.
#[derive(Clone, Debug)]
pub struct SplatMap {
    pub rows: usize,
    pub cols: usize,
    entries: Vec<SplatEntry>,
}

#[derive(Clone, Copy, Debug)]
struct SplatEntry {
    view: usize,
    col: usize,
    /// Ground-projected image rows and bilinear weights; zero weights when the
    /// ground point falls outside the image.
    rows: [usize; 2],
    weights: [f32; 2],
}

impl SplatMap {
    pub fn new(rig: &CameraRig, extent: &BevExtent) -> Self {
        let mut entries = Vec::with_capacity(extent.num_cells());
        for r in 0..extent.rows {
            for c in 0..extent.cols {
                let (x, y) = extent.cell_center(r, c);
                let (view, col) = rig.locate(y.atan2(x));
                let d = (x * x + y * y).sqrt().max(1e-3);
                let fr = rig.elevation_row(-(rig.height / d).atan()) - 0.5;
                let (rows, weights) = if fr < 0.0 || fr > (rig.h - 1) as f32 {
                    ([0, 0], [0.0, 0.0])
                } else {
                    let r0 = fr.floor() as usize;
                    let r1 = (r0 + 1).min(rig.h - 1);
                    let t = fr - r0 as f32;
                    ([r0, r1], [1.0 - t, t])
                };
                entries.push(SplatEntry { view, col, rows, weights });
            }
        }
        SplatMap { rows: extent.rows, cols: extent.cols, entries }
    }

    pub fn from_config(cfg: &SceneConfig) -> Self {
        Self::new(&CameraRig::from_config(cfg), &cfg.extent)
    }

    /// View seen by each cell, row-major.
    pub fn view_of_cells(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.view).collect()
    }

    /// Linear splat: channels 0..3 the ground-projected colour under the cell,
    /// channels 3..6 the column mean along the cell's viewing ray.
    pub fn splat(&self, images: &[CameraImage]) -> Vec<f32> {
        let n = self.rows * self.cols;
        let mut out = vec![0.0f32; CAMERA_FEATURES * n];
        let col_means: Vec<Vec<f32>> = images
            .iter()
            .map(|img| {
                let mut m = vec![0.0f32; 3 * img.w];
                for c in 0..3 {
                    for row in 0..img.h {
                        for col in 0..img.w {
                            m[c * img.w + col] += img.at(c, row, col);
                        }
                    }
                }
                m.iter_mut().for_each(|v| *v /= img.h as f32);
                m
            })
            .collect();
        for (i, e) in self.entries.iter().enumerate() {
            let Some(img) = images.iter().find(|im| im.view == e.view) else { continue };
            for c in 0..3 {
                out[c * n + i] = e.weights[0] * img.at(c, e.rows[0], e.col) + e.weights[1] * img.at(c, e.rows[1], e.col);
                out[(3 + c) * n + i] = col_means[e.view.min(col_means.len() - 1)][c * img.w + e.col];
            }
        }
        out
    }
}

pub fn camera_input<T: Scalar>(images: &[CameraImage], map: &SplatMap) -> Tensor<T> {
    let v = map.splat(images);
    Tensor::from_vec(&[CAMERA_FEATURES, map.rows, map.cols], v.into_iter().map(|x| T::lit(x as f64)).collect())
        .expect("splat shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::LidarPoint;

    fn pt(x: f32, y: f32, z: f32) -> LidarPoint {
        LidarPoint { x, y, z, intensity: 0.4, beam: 3 }
    }

    #[test]
    fn empty_and_single_point_statistics() {
        let e = BevExtent::toy();
        assert!(lidar_statistics(&PointCloud::new(32), &e).iter().all(|&v| v == 0.0));
        let pc = PointCloud { points: vec![pt(10.2, -3.7, 1.1)], beam_count: 32 };
        let s = lidar_statistics(&pc, &e);
        let n = e.num_cells();
        let nonzero: std::collections::BTreeSet<usize> =
            s.iter().enumerate().filter(|(_, &v)| v != 0.0).map(|(i, _)| i % n).collect();
        assert_eq!(nonzero.len(), 1);
    }

    #[test]
    fn translation_by_a_cell_shifts_statistics() {
        let e = BevExtent::toy();
        let pts: Vec<_> = (0..50).map(|i| pt(-20.0 + i as f32 * 0.7, 5.0 + (i % 7) as f32, 0.1 * i as f32)).collect();
        let a = lidar_statistics(&PointCloud { points: pts.clone(), beam_count: 32 }, &e);
        let moved: Vec<_> = pts.iter().map(|p| pt(p.x + 1.0, p.y, p.z)).collect();
        let b = lidar_statistics(&PointCloud { points: moved, beam_count: 32 }, &e);
        let n = e.num_cells();
        for ch in 0..LIDAR_STATS {
            for r in 0..e.rows {
                for c in 0..e.cols - 1 {
                    assert!((a[ch * n + r * e.cols + c] - b[ch * n + r * e.cols + c + 1]).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn splat_is_linear() {
        let cfg = SceneConfig::default();
        let map = SplatMap::from_config(&cfg);
        let zeros: Vec<_> = (0..6).map(|v| CameraImage::zeros(v, 32, 64)).collect();
        assert!(map.splat(&zeros).iter().all(|&v| v == 0.0));
        let mut rng = crate::seeding::rng_from(4);
        use rand::Rng;
        let imgs: Vec<_> = (0..6)
            .map(|v| CameraImage { view: v, h: 32, w: 64, pixels: (0..3 * 32 * 64).map(|_| rng.random::<f32>() * 0.5).collect() })
            .collect();
        let doubled: Vec<_> = imgs
            .iter()
            .map(|i| CameraImage { pixels: i.pixels.iter().map(|v| 2.0 * v).collect(), ..i.clone() })
            .collect();
        let a = map.splat(&imgs);
        let b = map.splat(&doubled);
        for (x, y) in a.iter().zip(&b) {
            assert!((2.0 * x - y).abs() < 1e-5);
        }
    }
}
