//! Synthetic world: ground-truth boxes plus simulated LiDAR and camera returns.

mod generate;
mod raycast;

pub use generate::generate_scene;
pub use raycast::{ray_box_interval, BoxHit};

use serde::{Deserialize, Serialize};

/// Object classes of the toy world.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassSpec {
    pub name: &'static str,
    pub length: f32,
    pub width: f32,
    pub height: f32,
    pub albedo: [f32; 3],
    pub reflectivity: f32,
}

pub const CLASSES: [ClassSpec; 3] = [
    ClassSpec { name: "car", length: 4.5, width: 1.9, height: 1.6, albedo: [0.80, 0.20, 0.20], reflectivity: 0.60 },
    ClassSpec { name: "truck", length: 8.0, width: 2.6, height: 3.2, albedo: [0.20, 0.30, 0.85], reflectivity: 0.75 },
    ClassSpec { name: "cyclist", length: 1.8, width: 0.8, height: 1.7, albedo: [0.20, 0.80, 0.30], reflectivity: 0.45 },
];

pub const NUM_CLASSES: usize = CLASSES.len();

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundBox {
    pub center: [f32; 2],
    /// Length along the heading, width across it.
    pub size: [f32; 2],
    pub yaw: f32,
    pub class_id: usize,
}

impl GroundBox {
    pub fn height(&self) -> f32 {
        CLASSES[self.class_id].height
    }

    /// Corners in counter-clockwise order.
    pub fn corners(&self) -> [[f32; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let (hl, hw) = (self.size[0] / 2.0, self.size[1] / 2.0);
        let local = [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]];
        local.map(|[a, b]| [self.center[0] + c * a - s * b, self.center[1] + s * a + c * b])
    }

    /// Euclidean distance from `p` to the footprint (0 inside).
    pub fn distance_to(&self, p: [f32; 2]) -> f32 {
        let (s, c) = self.yaw.sin_cos();
        let (dx, dy) = (p[0] - self.center[0], p[1] - self.center[1]);
        let lx = (c * dx + s * dy).abs() - self.size[0] / 2.0;
        let ly = (-s * dx + c * dy).abs() - self.size[1] / 2.0;
        (lx.max(0.0).powi(2) + ly.max(0.0).powi(2)).sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LidarPoint {
    pub x: f32,
    pub y: f32,
    pub z: f32,
    pub intensity: f32,
    pub beam: u32,
}

impl LidarPoint {
    pub fn range(&self) -> f32 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn azimuth(&self) -> f32 {
        self.y.atan2(self.x).rem_euclid(std::f32::consts::TAU)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub points: Vec<LidarPoint>,
    pub beam_count: u32,
}

impl PointCloud {
    pub fn new(beam_count: u32) -> Self {
        PointCloud { points: Vec::new(), beam_count }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Distinct beam indices present, ascending.
    pub fn beams_present(&self) -> Vec<u32> {
        let mut seen = vec![false; self.beam_count as usize];
        for p in &self.points {
            seen[p.beam as usize] = true;
        }
        (0..self.beam_count).filter(|&b| seen[b as usize]).collect()
    }
}

/// One camera view: `[3, h, w]` planes, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraImage {
    pub view: usize,
    pub h: usize,
    pub w: usize,
    pub pixels: Vec<f32>,
}

impl CameraImage {
    pub fn zeros(view: usize, h: usize, w: usize) -> Self {
        CameraImage { view, h, w, pixels: vec![0.0; 3 * h * w] }
    }

    pub fn at(&self, c: usize, r: usize, col: usize) -> f32 {
        self.pixels[(c * self.h + r) * self.w + col]
    }

    pub fn set(&mut self, c: usize, r: usize, col: usize, v: f32) {
        self.pixels[(c * self.h + r) * self.w + col] = v;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Weather {
    Clean,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub sample_id: u64,
    pub boxes: Vec<GroundBox>,
    pub cloud: PointCloud,
    pub images: Vec<CameraImage>,
    pub weather: Weather,
}

/// Angular layout shared by the renderer and the camera encoder.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraRig {
    pub n_views: usize,
    pub h: usize,
    pub w: usize,
    pub height: f32,
    pub top_rad: f32,
    pub vfov_rad: f32,
}

impl CameraRig {
    pub fn from_config(cfg: &crate::config::SceneConfig) -> Self {
        CameraRig {
            n_views: cfg.n_views,
            h: cfg.image_h,
            w: cfg.image_w,
            height: cfg.camera_height,
            top_rad: cfg.vfov_top_deg.to_radians(),
            vfov_rad: cfg.vfov_deg.to_radians(),
        }
    }

    pub fn hfov(&self) -> f32 {
        std::f32::consts::TAU / self.n_views as f32
    }

    /// Optical-axis azimuth of view `v`.
    pub fn view_center(&self, v: usize) -> f32 {
        v as f32 * self.hfov()
    }

    /// Azimuth through the middle of column `col` (left column = largest azimuth).
    pub fn column_azimuth(&self, v: usize, col: usize) -> f32 {
        self.view_center(v) + self.hfov() / 2.0 - (col as f32 + 0.5) * self.hfov() / self.w as f32
    }

    pub fn row_elevation(&self, row: usize) -> f32 {
        self.top_rad - (row as f32 + 0.5) * self.vfov_rad / self.h as f32
    }

    /// Fractional row at elevation `e` (row centres sit at `k + 0.5`).
    pub fn elevation_row(&self, e: f32) -> f32 {
        (self.top_rad - e) / self.vfov_rad * self.h as f32
    }

    /// `(view, column)` seeing azimuth `phi`.
    pub fn locate(&self, phi: f32) -> (usize, usize) {
        let hf = self.hfov();
        let a = (phi + hf / 2.0).rem_euclid(std::f32::consts::TAU);
        let v = ((a / hf).floor() as usize).min(self.n_views - 1);
        let within = hf - (a - v as f32 * hf);
        let col = ((within / hf * self.w as f32).floor() as usize).min(self.w - 1);
        (v, col)
    }
}
