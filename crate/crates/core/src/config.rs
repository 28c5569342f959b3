//! Run configuration. Every field round-trips through TOML so a run directory
//! can carry the exact config that produced it.

use serde::{Deserialize, Serialize};

use crate::corruption::CorruptionKind;
use crate::error::{config_err, Result};
use crate::geometry::BevExtent;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub extent: BevExtent,
    /// Box centres are drawn from `[-placement_half_width, placement_half_width]^2`.
    pub placement_half_width: f32,
    /// No box centre closer than this to the ego vehicle.
    pub min_ego_distance: f32,
    pub min_boxes: usize,
    pub max_boxes: usize,
    pub beams: usize,
    pub elevation_min_deg: f32,
    pub elevation_max_deg: f32,
    pub azimuth_step_deg: f32,
    pub lidar_height: f32,
    pub max_range: f32,
    pub n_views: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub camera_height: f32,
    pub vfov_top_deg: f32,
    pub vfov_deg: f32,
    /// Whole-scene resampling attempts before giving up.
    pub max_scene_attempts: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            extent: BevExtent::toy(),
            placement_half_width: 48.0,
            min_ego_distance: 4.0,
            min_boxes: 4,
            max_boxes: 10,
            beams: 32,
            elevation_min_deg: -30.67,
            elevation_max_deg: 10.67,
            azimuth_step_deg: 1.0,
            lidar_height: 1.8,
            max_range: 70.0,
            n_views: 6,
            image_h: 32,
            image_w: 64,
            camera_height: 1.6,
            vfov_top_deg: 10.0,
            vfov_deg: 30.0,
            max_scene_attempts: 64,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_boxes > self.max_boxes {
            return config_err("min_boxes > max_boxes");
        }
        if self.beams == 0 || self.n_views == 0 || self.image_h == 0 || self.image_w == 0 {
            return config_err("beams, views and image size must be positive");
        }
        if self.extent.rows == 0 || self.extent.cols == 0 || self.extent.cell <= 0.0 {
            return config_err("BEV extent must be nonempty");
        }
        Ok(())
    }
}

/// Widths of the frozen toy detector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HostConfig {
    pub channels: usize,
    pub lidar_channels: usize,
    pub camera_channels: usize,
    pub encoder_hidden: usize,
    pub head_hidden: usize,
    pub num_classes: usize,
}

impl Default for HostConfig {
    fn default() -> Self {
        HostConfig {
            channels: 64,
            lidar_channels: 64,
            camera_channels: 32,
            encoder_hidden: 32,
            head_hidden: 32,
            num_classes: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PfsConfig {
    pub channels: usize,
    pub lidar_channels: usize,
    pub gn_groups: usize,
    pub gn_eps: f64,
    /// Hidden width of the three stride-2 convs of the reliability net.
    pub rel_hidden: usize,
    /// Hidden width of each correction expert.
    pub expert_hidden: usize,
    pub alpha_init: f64,
    pub rel_bias_init: f64,
    pub gate_bias_init: f64,
    pub mix_init: f64,
    /// Multiplier on the Kaiming bound of the two output heads whose bias
    /// sets the initial gate values (reliability up-conv, correction gate).
    pub gate_weight_scale: f64,
}

impl PfsConfig {
    /// Desk-scale preset matching the toy host (C = 64).
    pub fn toy() -> Self {
        PfsConfig {
            channels: 64,
            lidar_channels: 64,
            gn_groups: 8,
            gn_eps: 1e-5,
            rel_hidden: 64,
            expert_hidden: 32,
            alpha_init: -5.0,
            rel_bias_init: 4.0,
            gate_bias_init: -4.0,
            mix_init: 0.5,
            gate_weight_scale: 0.01,
        }
    }

    /// Host-scale preset (C = 256) used for parameter accounting.
    pub fn host_scale() -> Self {
        PfsConfig { channels: 256, lidar_channels: 256, rel_hidden: 100, expert_hidden: 270, ..Self::toy() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.channels % 2 != 0 {
            return config_err(format!("stabilizer channel count {} must be even", self.channels));
        }
        if self.gn_groups == 0 || self.channels % self.gn_groups != 0 {
            return config_err(format!("{} channels not divisible into {} groups", self.channels, self.gn_groups));
        }
        Ok(())
    }
}

/// Which samples take the corrupted branch of the reliability loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionIndicator {
    /// Only LiDAR corruptions change point densities, so only they count.
    LidarOnly,
    /// Any corruption takes the target branch (ablation switch).
    Any,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub focal_alpha: f64,
    pub focal_beta: f64,
    pub reg_weight: f64,
    pub log_eps: f64,
    pub indicator: CorruptionIndicator,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { focal_alpha: 2.0, focal_beta: 4.0, reg_weight: 1.0, log_eps: 1e-6, indicator: CorruptionIndicator::LidarOnly }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage_id: u8,
    pub trainable_blocks: Vec<u8>,
    /// Blocks evaluated in the forward pass; later blocks are bypassed.
    pub active_blocks: Vec<u8>,
    pub corruption_pool: Vec<CorruptionKind>,
    pub corruption_prob: f64,
    pub epochs: usize,
    pub lr0: f64,
    pub lambda_rel: f64,
    pub alpha_anchor: f64,
    pub clip_max_norm: Option<f64>,
    pub batch_size: usize,
    pub weight_decay: f64,
}

impl StageConfig {
    pub fn stage1() -> Self {
        use CorruptionKind::*;
        StageConfig {
            stage_id: 1,
            trainable_blocks: vec![1],
            active_blocks: vec![1],
            corruption_pool: vec![RainLens, LowLight, BeamReduction, Miscalibration],
            corruption_prob: 0.30,
            epochs: 6,
            lr0: 2e-4,
            lambda_rel: 0.0,
            alpha_anchor: 0.2,
            clip_max_norm: None,
            batch_size: 4,
            weight_decay: 0.01,
        }
    }

    pub fn stage2() -> Self {
        StageConfig {
            stage_id: 2,
            trainable_blocks: vec![1, 2],
            active_blocks: vec![1, 2],
            corruption_pool: CorruptionKind::ALL.to_vec(),
            epochs: 4,
            lr0: 1e-4,
            lambda_rel: 1.0,
            clip_max_norm: Some(5.0),
            ..Self::stage1()
        }
    }

    pub fn stage3() -> Self {
        StageConfig {
            stage_id: 3,
            trainable_blocks: vec![3],
            active_blocks: vec![1, 2, 3],
            lr0: 2e-4,
            ..Self::stage2()
        }
    }

    pub fn defaults() -> Vec<StageConfig> {
        vec![Self::stage1(), Self::stage2(), Self::stage3()]
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.stage_id) {
            return config_err(format!("stage id {} outside 1..=3", self.stage_id));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return config_err("batch size and epochs must be positive");
        }
        if !(0.0..=1.0).contains(&self.corruption_prob) {
            return config_err("corruption probability outside [0, 1]");
        }
        if self.trainable_blocks.iter().any(|b| !self.active_blocks.contains(b)) {
            return config_err("a trainable block must be active");
        }
        if self.lambda_rel < 0.0 {
            return config_err("lambda_rel must be non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub max_epochs: usize,
    pub lr0: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    /// Stop after this many epochs without validation improvement.
    pub patience: usize,
    /// Validation samples scored after each epoch.
    pub val_samples: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { max_epochs: 8, lr0: 2e-3, batch_size: 4, weight_decay: 0.01, patience: 2, val_samples: 100 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub dataset_seed: u64,
    pub train_samples: usize,
    pub val_samples: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig { dataset_seed: 2024, train_samples: 2000, val_samples: 400 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub score_threshold: f64,
    pub max_detections: usize,
    pub distance_thresholds: Vec<f64>,
    pub levels: Vec<u8>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { score_threshold: 0.05, max_detections: 60, distance_thresholds: vec![0.5, 1.0, 2.0, 4.0], levels: vec![3] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub global_seed: u64,
    pub training_seed: u64,
    pub dataset: DatasetConfig,
    pub scene: SceneConfig,
    pub host: HostConfig,
    pub pfs: PfsConfig,
    pub loss: LossConfig,
    pub pretrain: PretrainConfig,
    pub stages: Vec<StageConfig>,
    pub eval: EvalConfig,
    /// Severity table file; the built-in table is used when absent.
    pub severity_path: Option<String>,
}

impl RunConfig {
    /// Desk-scale preset: C = 64 on the 108 x 108 grid.
    pub fn toy() -> Self {
        RunConfig {
            global_seed: 7,
            training_seed: 11,
            dataset: DatasetConfig::default(),
            scene: SceneConfig::default(),
            host: HostConfig::default(),
            pfs: PfsConfig::toy(),
            loss: LossConfig::default(),
            pretrain: PretrainConfig::default(),
            stages: StageConfig::defaults(),
            eval: EvalConfig::default(),
            severity_path: None,
        }
    }

    /// Host-scale widths (C = 256, 180 x 180). Only used for parameter accounting.
    pub fn host_scale() -> Self {
        let mut cfg = Self::toy();
        cfg.pfs = PfsConfig::host_scale();
        cfg.host.channels = 256;
        cfg.host.lidar_channels = 256;
        cfg.scene.extent = BevExtent { x_min: -54.0, y_min: -54.0, cell: 0.6, rows: 180, cols: 180 };
        cfg
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "host" => Ok(Self::host_scale()),
            other => config_err(format!("unknown preset {other:?} (expected toy or host)")),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.pfs.validate()?;
        if self.pfs.channels != self.host.channels {
            return config_err("stabilizer and host channel counts differ");
        }
        if self.pfs.lidar_channels != self.host.lidar_channels {
            return config_err("stabilizer and host LiDAR channel counts differ");
        }
        for s in &self.stages {
            s.validate()?;
        }
        Ok(())
    }

    pub fn stage(&self, id: u8) -> Result<&StageConfig> {
        self.stages
            .iter()
            .find(|s| s.stage_id == id)
            .ok_or_else(|| crate::error::PfsError::Config(format!("no configuration for stage {id}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| crate::error::PfsError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let cfg = RunConfig::toy();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn stage_table_values() {
        let s = StageConfig::defaults();
        assert_eq!((s[0].epochs, s[0].lr0, s[0].clip_max_norm), (6, 2e-4, None));
        assert_eq!(s[0].corruption_pool.len(), 4);
        assert_eq!((s[1].epochs, s[1].lr0, s[1].clip_max_norm), (4, 1e-4, Some(5.0)));
        assert_eq!((s[1].lambda_rel, s[1].alpha_anchor), (1.0, 0.2));
        assert_eq!(s[1].corruption_pool.len(), 8);
        assert_eq!((s[2].epochs, s[2].lr0, s[2].clip_max_norm), (4, 2e-4, Some(5.0)));
        assert_eq!(s[2].trainable_blocks, vec![3]);
        assert!(s.iter().all(|st| st.batch_size == 4 && st.corruption_prob == 0.30));
    }

    #[test]
    fn odd_channels_rejected() {
        let mut p = PfsConfig::toy();
        p.channels = 63;
        assert!(p.validate().unwrap_err().is_config());
    }

    #[test]
    fn toy_preset_is_108_grid() {
        let cfg = RunConfig::toy();
        assert_eq!((cfg.scene.extent.rows, cfg.scene.extent.cols), (108, 108));
        cfg.validate().unwrap();
    }
}
