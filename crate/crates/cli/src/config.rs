//! Resolved run settings: preset defaults, then the `--config` JSON file,
//! then command-line overrides.

use std::path::Path;

use polycrys::genmodel::{DenoiserConfig, ScheduleConfig, TrainConfig, VaeConfig};
use polycrys::grains::{SegmentationConfig, SummaryBins};
use polycrys::volume::{DEFAULT_PALETTE_ID, DEFAULT_VOXEL_SIZE_UM};
use polycrys::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Small models and step budgets that train on one CPU core.
    Desk,
    /// Full-size model geometry and the original optimizer settings.
    Paper,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            _ => Err(Error::Config(format!("unknown preset {s:?} (expected desk or paper)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Settings {
    pub preset: Preset,
    /// Cube side of synthesized volumes.
    pub size: usize,
    pub regularity: f64,
    pub palette: String,
    pub voxel_size_um: f64,
    pub segmentation: SegmentationConfig,
    pub bins: SummaryBins,
    /// `None`: match the training data's cube side.
    pub vae: Option<VaeConfig>,
    pub denoiser: DenoiserConfig,
    pub vae_training: TrainConfig,
    pub diffusion_training: TrainConfig,
    pub schedule: ScheduleConfig,
    /// Moving-average window for loss reports.
    pub loss_window: usize,
}

impl Settings {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Desk => Settings {
                preset: p,
                size: 64,
                regularity: 0.5,
                palette: DEFAULT_PALETTE_ID.into(),
                voxel_size_um: DEFAULT_VOXEL_SIZE_UM,
                segmentation: SegmentationConfig::default(),
                bins: SummaryBins::default(),
                vae: None,
                denoiser: DenoiserConfig::default(),
                vae_training: TrainConfig {
                    steps: 2000,
                    batch_size: 4,
                    lr: 2e-3,
                    ..TrainConfig::default()
                },
                diffusion_training: TrainConfig {
                    steps: 3000,
                    batch_size: 16,
                    lr: 1e-3,
                    ..TrainConfig::default()
                },
                schedule: ScheduleConfig::default(),
                loss_window: 100,
            },
            Preset::Paper => Settings {
                preset: p,
                vae: Some(VaeConfig::paper()),
                denoiser: DenoiserConfig {
                    latent_side: VaeConfig::paper().latent_side(),
                    ..DenoiserConfig::default()
                },
                vae_training: TrainConfig::paper_vae(),
                diffusion_training: TrainConfig::paper_diffusion(),
                ..Settings::preset(Preset::Desk)
            },
        }
    }

    /// Preset named in `value` (default desk) with `value` merged over it.
    pub fn from_json(value: &Value) -> Result<Self> {
        let obj = value
            .as_object()
            .ok_or_else(|| Error::Config("config file must hold a JSON object".into()))?;
        let preset: Preset = match obj.get("preset") {
            None => Preset::Desk,
            Some(Value::String(s)) => s.parse()?,
            Some(v) => return Err(Error::Config(format!("preset must be a string, got {v}"))),
        };
        let mut base = serde_json::to_value(Settings::preset(preset))?;
        merge(&mut base, value);
        serde_json::from_value(base).map_err(|e| Error::Config(format!("config: {e}")))
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Settings::preset(Preset::Desk));
        };
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: Value =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Settings::from_json(&value)
    }

    pub fn validate(&self) -> Result<()> {
        if self.size == 0 {
            return Err(Error::Config("size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.regularity) {
            return Err(Error::Config(format!("regularity {} outside [0, 1]", self.regularity)));
        }
        if !(self.voxel_size_um > 0.0) {
            return Err(Error::Config(format!("voxel size {} must be positive", self.voxel_size_um)));
        }
        if let Some(v) = &self.vae {
            v.validate()?;
        }
        self.denoiser.validate()?;
        self.schedule.build()?;
        Ok(())
    }
}

/// Recursively overlays `patch` onto `base`; non-object values replace.
fn merge(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, p) => *b = p.clone(),
    }
}
