//! The full run configuration tree. Every field has a default; a TOML file
//! overrides defaults and CLI flags override the file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::dsp::DspConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::optim::{AdamConfig, LarsConfig, ScheduleConfig};

/// Pretraining loop shape. The paper-scale batch is 1024; the desk default
/// is 64, which the objective tolerates well.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainerConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Trade-off weight of the redundancy-reduction term.
    pub lambda: f64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            epochs: 100,
            batch_size: 64,
            lambda: crate::objective::DEFAULT_LAMBDA,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "pretraining batch size must be >= 2, got {}",
                self.batch_size
            )));
        }
        if self.lambda < 0.0 {
            return Err(Error::Config("lambda must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads for the compute pool; absent = library default.
    pub threads: Option<usize>,
    pub dsp: DspConfig,
    pub augment: AugmentConfig,
    pub model: ModelConfig,
    pub lars: LarsConfig,
    pub schedule: ScheduleConfig,
    pub adam: AdamConfig,
    pub trainer: TrainerConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.dsp.validate()?;
        self.augment.rrc.validate()?;
        self.model.validate()?;
        self.lars.validate()?;
        self.schedule.validate()?;
        self.adam.validate()?;
        self.trainer.validate()?;
        if self.dsp.n_mels != self.model.n_mels {
            return Err(Error::Config(format!(
                "dsp.n_mels ({}) must match model.n_mels ({})",
                self.dsp.n_mels, self.model.n_mels
            )));
        }
        if self.schedule.total_epochs < self.trainer.epochs {
            return Err(Error::Config(format!(
                "schedule covers {} epochs but the run wants {}",
                self.schedule.total_epochs, self.trainer.epochs
            )));
        }
        Ok(())
    }

    pub fn from_toml_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn save_toml(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()?).map_err(|e| Error::io(path, e))
    }
}
