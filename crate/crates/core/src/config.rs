//! Run configuration for training and evaluation, read from JSON.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::EncoderConfig;
use crate::head::HeadVariant;
use crate::lm::LMConfig;
use crate::model::ModelConfig;
use crate::optim::AdamConfig;
use crate::text::Vocabulary;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid run configuration: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    #[default]
    Desk,
    Paper,
    /// Architecture given in full by the `lm`, `encoder` and
    /// `gate_zero_init` fields.
    Custom,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    #[default]
    Full,
    Partial,
}

impl Task {
    pub fn is_partial(self) -> bool {
        self == Task::Partial
    }
}

impl std::str::FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "full" => Ok(Task::Full),
            "partial" => Ok(Task::Partial),
            other => Err(format!("unknown task `{other}`; valid tasks: full, partial")),
        }
    }
}

fn default_batch() -> usize {
    4
}

fn default_epochs() -> usize {
    30
}

fn default_negative_prob() -> f64 {
    0.25
}

fn default_grad_clip() -> Option<f64> {
    Some(1.0)
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub preset: Preset,
    #[serde(default)]
    pub head: HeadVariant,
    #[serde(default)]
    pub freeze_lm: bool,
    #[serde(default = "default_true")]
    pub gate_zero_init: bool,
    /// Custom preset only.
    #[serde(default)]
    pub lm: Option<LMConfig>,
    /// Custom preset only.
    #[serde(default)]
    pub encoder: Option<EncoderConfig>,
    #[serde(default)]
    pub optimizer: AdamConfig,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Stops training after this many optimizer steps.
    #[serde(default)]
    pub max_steps: Option<usize>,
    /// Seeds parameter initialization and batch sampling.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    #[serde(default)]
    pub task: Task,
    /// Chance that a sample also contributes one non-applicable word.
    #[serde(default = "default_negative_prob")]
    pub negative_prob: f64,
    /// Rescales the gradient when its global L2 norm exceeds this value;
    /// `null` disables clipping.
    #[serde(default = "default_grad_clip")]
    pub grad_clip: Option<f64>,
    /// Scan every forward value and gradient for NaN/Inf.
    #[serde(default)]
    pub checked: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        match self.preset {
            Preset::Custom => {
                if self.lm.is_none() || self.encoder.is_none() {
                    return bad("the custom preset needs both `lm` and `encoder`".into());
                }
            }
            _ => {
                if self.lm.is_some() || self.encoder.is_some() {
                    return bad("`lm` and `encoder` are only accepted with the custom preset".into());
                }
            }
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.negative_prob) {
            return bad(format!("negative_prob {} is outside [0, 1]", self.negative_prob));
        }
        if self.grad_clip.is_some_and(|c| c.is_nan() || c <= 0.0) {
            return bad("grad_clip must be positive".into());
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.eps > 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2)) {
            return bad(format!("optimizer settings out of range: {o:?}"));
        }
        Ok(())
    }

    /// Model architecture for `vocabulary`.
    pub fn model_config(&self, vocabulary: Vocabulary) -> Result<ModelConfig, ConfigError> {
        self.validate()?;
        let mut cfg = match self.preset {
            Preset::Desk => ModelConfig::desk(vocabulary, self.head),
            Preset::Paper => ModelConfig::paper(vocabulary, self.head),
            Preset::Custom => ModelConfig {
                vocabulary,
                lm: self.lm.clone().expect("validated"),
                encoder: self.encoder.clone().expect("validated"),
                head: self.head,
                gate_zero_init: self.gate_zero_init,
                freeze_lm: self.freeze_lm,
            },
        };
        cfg.gate_zero_init = self.gate_zero_init;
        cfg.freeze_lm = self.freeze_lm;
        cfg.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(cfg)
    }
}
