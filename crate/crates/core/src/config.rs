//! Single TOML document holding every setting of an experiment.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{CropSettings, SynthConfig};
use crate::error::{Error, Result};
use crate::trainer::TrainingConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Side of the square window cut around the disc before resizing.
    pub crop_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { crop_size: 600 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub synth: SynthConfig,
    pub data: DataConfig,
    pub train: TrainingConfig,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.train.validate()?;
        if self.data.crop_size == 0 {
            return Err(Error::Config("crop_size must be positive".into()));
        }
        Ok(())
    }

    /// Overrides every seed in the document.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.synth.seed = seed;
        self.train.seed = seed;
        self
    }

    /// Loading window and network input side.
    pub fn crop(&self) -> CropSettings {
        CropSettings {
            crop_size: self.data.crop_size,
            out_size: self.train.backbone.input_size,
        }
    }
}
