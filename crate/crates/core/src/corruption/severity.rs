use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{PfsError, Result};

const BUILTIN: &str = include_str!("../../configs/severity.toml");

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RainParams {
    pub haze: f32,
    pub drops: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LowLightParams {
    pub gamma: f32,
    pub sigma: f32,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OcclusionParams {
    pub area: f32,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropoutParams {
    pub views: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeamReductionParams {
    pub step: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RangeDropoutParams {
    pub p_max: f32,
    pub r_max: f32,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SectorParams {
    pub theta_deg: f32,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiscalibrationParams {
    pub rot_deg: f32,
    pub trans_m: f32,
}

/// One parameter row per (kind, level); levels 1..3 map to indices 0..2.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeverityTable {
    pub rain_lens: [RainParams; 3],
    pub low_light: [LowLightParams; 3],
    pub occlusion: [OcclusionParams; 3],
    pub dropout: [DropoutParams; 3],
    pub beam_reduction: [BeamReductionParams; 3],
    pub range_dropout: [RangeDropoutParams; 3],
    pub sector_dropout: [SectorParams; 3],
    pub miscalibration: [MiscalibrationParams; 3],
}

impl SeverityTable {
    pub fn builtin() -> Self {
        Self::from_toml(BUILTIN).expect("built-in severity table parses")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let t: SeverityTable = toml::from_str(text).map_err(|e| PfsError::Config(format!("severity table: {e}")))?;
        t.validate()?;
        Ok(t)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| PfsError::Config(format!("cannot read severity table {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Built-in table unless a path is given.
    pub fn resolve(path: Option<&str>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::builtin()), Self::load)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PfsError::Config(m));
        for r in &self.rain_lens {
            if !(0.0..=1.0).contains(&r.haze) {
                return bad(format!("rain haze {} outside [0, 1]", r.haze));
            }
        }
        for l in &self.low_light {
            if l.gamma <= 0.0 || l.sigma < 0.0 {
                return bad(format!("invalid low-light row {l:?}"));
            }
        }
        for o in &self.occlusion {
            if !(0.0..=1.0).contains(&o.area) {
                return bad(format!("occlusion area {} outside [0, 1]", o.area));
            }
        }
        for b in &self.beam_reduction {
            if b.step == 0 {
                return bad("beam step must be positive".into());
            }
        }
        for r in &self.range_dropout {
            if !(0.0..=1.0).contains(&r.p_max) || r.r_max <= 0.0 {
                return bad(format!("invalid range-dropout row {r:?}"));
            }
        }
        for s in &self.sector_dropout {
            if !(0.0..360.0).contains(&s.theta_deg) {
                return bad(format!("sector angle {} outside [0, 360)", s.theta_deg));
            }
        }
        Ok(())
    }
}
