//! JSON run configuration and checkpoints.
//!
//! Floats are written in shortest round-trip form and parsed with exact
//! rounding, so a save/load cycle reproduces every `f64` bit for bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{GamError, Result};
use crate::model::{LanguageModel, ModelSpec};
use crate::task::TaskSpec;
use crate::tensor::ParamSet;
use crate::train::TrainConfig;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub task: TaskSpec,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.task.validate()?;
        self.train.validate()?;
        let pos = &self.model.position;
        if pos.enabled && self.task.seq_len() > pos.n_max {
            return Err(GamError::Config(format!(
                "task sequences of length {} exceed model.position.n_max = {}",
                self.task.seq_len(),
                pos.n_max
            )));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    pub fn language_model(&self) -> Result<LanguageModel> {
        LanguageModel::new(self.model.clone(), self.task.vocab())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: RunConfig,
    pub params: ParamSet,
}

#[derive(Deserialize)]
struct VersionProbe {
    format_version: u32,
}

impl Checkpoint {
    pub fn new(config: RunConfig, params: ParamSet) -> Self {
        Checkpoint { format_version: CHECKPOINT_FORMAT_VERSION, config, params }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        // Check the version first so older or newer layouts fail with a clear message.
        let probe: VersionProbe = serde_json::from_str(text)?;
        if probe.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(GamError::FormatVersion {
                found: probe.format_version,
                expected: CHECKPOINT_FORMAT_VERSION,
            });
        }
        let ckpt: Checkpoint = serde_json::from_str(text)?;
        ckpt.config.validate()?;
        ckpt.config.language_model()?.check_params(&ckpt.params)?;
        Ok(ckpt)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }
}
