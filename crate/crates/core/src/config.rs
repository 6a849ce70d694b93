//! The declarative run file read by the command-line tool.
//!
//! ```toml
//! [run]
//! output_dir = "runs/dataset1"
//!
//! [training]
//! epochs = 100
//!
//! [dataset]
//! root = "data/dataset1"
//! ```
//!
//! Every key has a default and unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::archive::WeightSource;
use crate::data::{AugmentationConfig, DatasetSpec};
use crate::loss::LossConfig;
use crate::metrics::DEFAULT_THRESHOLD;
use crate::model::ModelConfig;
use crate::optim::AdamConfig;
use crate::training::{Optimizer, TrainConfig};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid override {0}")]
    Override(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub output_dir: PathBuf,
    /// `error`, `warn`, `info`, `debug` or `trace`.
    pub log_level: String,
    pub precision: Precision,
    /// Probability at or above which a pixel counts as foreground.
    pub threshold: f64,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs/default"),
            log_level: "info".into(),
            precision: Precision::F32,
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub optimizer: Optimizer,
    pub seed: u64,
    pub validation_fraction: f64,
    pub adam: AdamConfig,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            epochs: t.epochs,
            optimizer: t.optimizer,
            seed: t.seed,
            validation_fraction: t.validation_fraction,
            adam: t.adam,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run: RunSection,
    pub training: TrainingSection,
    pub dataset: DatasetSpec,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub augmentation: AugmentationConfig,
    pub weights: WeightSource,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::from_train(&TrainConfig::default())
    }
}

impl RunConfig {
    pub fn from_train(t: &TrainConfig) -> Self {
        Self {
            run: RunSection::default(),
            training: TrainingSection {
                batch_size: t.batch_size,
                learning_rate: t.learning_rate,
                epochs: t.epochs,
                optimizer: t.optimizer,
                seed: t.seed,
                validation_fraction: t.validation_fraction,
                adam: t.adam,
            },
            dataset: t.dataset.clone(),
            model: t.model.clone(),
            loss: t.loss,
            augmentation: t.augmentation.clone(),
            weights: t.weights.clone(),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.training;
        TrainConfig {
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            epochs: t.epochs,
            optimizer: t.optimizer,
            adam: t.adam,
            seed: t.seed,
            validation_fraction: t.validation_fraction,
            loss: self.loss,
            model: self.model.clone(),
            dataset: self.dataset.clone(),
            augmentation: self.augmentation.clone(),
            weights: self.weights.clone(),
        }
    }

    /// Paths inside the file are taken relative to the file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::parse(&text).map_err(|message| ConfigError::Parse {
            path: path.to_path_buf(),
            message,
        })?;
        if let Some(base) = path.parent() {
            cfg.rebase(base);
        }
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.run.output_dir);
        fix(&mut self.dataset.root);
        if let Some(p) = &mut self.weights.path {
            fix(p);
        }
        if let Some(p) = &mut self.weights.cache_dir {
            fix(p);
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Applies a `section.key=value` override, parsed as a TOML value.
    pub fn set(&mut self, assignment: &str) -> Result<(), ConfigError> {
        let bad = || ConfigError::Override(assignment.to_string());
        let (key, value) = assignment.split_once('=').ok_or_else(bad)?;
        let mut doc: toml::Value = toml::Value::try_from(&*self).map_err(|_| bad())?;
        let parsed: toml::Value = toml::from_str::<toml::Table>(&format!("v = {}", value.trim()))
            .map(|mut t| t.remove("v").unwrap())
            .or_else(|_| Ok::<_, ConfigError>(toml::Value::String(value.trim().to_string())))?;
        let mut cur = &mut doc;
        let parts: Vec<&str> = key.trim().split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let table = cur.as_table_mut().ok_or_else(bad)?;
            if i + 1 == parts.len() {
                table.insert(part.to_string(), parsed.clone());
                break;
            }
            cur = table.entry(part.to_string()).or_insert_with(|| toml::Value::Table(Default::default()));
        }
        *self = doc.try_into().map_err(|e: toml::de::Error| ConfigError::Override(format!("{assignment}: {e}")))?;
        Ok(())
    }
}
