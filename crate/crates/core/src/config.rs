//! Experiment configuration read from TOML.
//!
//! Every field has a default, so an empty file is a valid config. Single
//! values can be overridden with dotted keys such as `train.lambda=0.01`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::pyramid::ModelConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// SGD only.
    pub momentum: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            momentum: 0.9,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    /// Weight of the transform regularizer.
    pub lambda: f64,
    /// Weight of the scale competition term.
    pub alpha: f64,
    /// Validation samples scored after each epoch; 0 skips validation.
    pub val_samples: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 32,
            lambda: 1e-4,
            alpha: 0.1,
            val_samples: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    /// Decode boxes through the predicted transforms; `false` reports the
    /// default boxes of the same locations.
    pub use_transform: bool,
    pub batch_size: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            use_transform: true,
            batch_size: 50,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathSettings {
    /// Existing dataset directory; when unset the dataset is generated from `[data]`.
    pub dataset: Option<PathBuf>,
    /// Output directory, relative paths resolve against the output root.
    pub output: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DatasetSpec,
    pub optim: OptimConfig,
    pub train: TrainSettings,
    pub eval: EvalSettings,
    pub paths: PathSettings,
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.validate().map_err(|e| Error::Config(e.to_string()))?;
        let t = &self.train;
        if !(t.lambda >= 0.0 && t.alpha >= 0.0) {
            return Err(Error::Config(format!("lambda and alpha must be >= 0, got {} and {}", t.lambda, t.alpha)));
        }
        if t.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2 for batch norm".into()));
        }
        if !(self.optim.lr > 0.0 && self.optim.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.optim.lr)));
        }
        if self.eval.batch_size == 0 {
            return Err(Error::Config("eval batch_size must be positive".into()));
        }
        if self.model.num_classes != self.data.num_classes {
            return Err(Error::Config(format!(
                "model has {} classes but data has {}",
                self.model.num_classes, self.data.num_classes
            )));
        }
        Ok(())
    }

    /// Applies `section.key=value`; the value is parsed as a TOML literal and
    /// falls back to a plain string. Only types are checked here, so that
    /// related fields can be changed one at a time; call [`Self::validate`]
    /// after the last override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
        let key = key.trim();
        let raw = raw.trim();
        let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        let mut root = toml::Value::try_from(&*self).map_err(|e| Error::Config(e.to_string()))?;
        let mut slot = &mut root;
        let parts: Vec<&str> = key.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let table = slot
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("{key}: {part} is not a section")))?;
            if i + 1 == parts.len() {
                table.insert(part.to_string(), value.clone());
                break;
            }
            slot = table
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        }
        let updated: Self = root
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("override {key}: {e}")))?;
        *self = updated;
        Ok(())
    }
}
