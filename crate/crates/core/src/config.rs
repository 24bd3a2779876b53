//! Whole-run configuration: one JSON file describes the model, training,
//! recurrence strategy, data and output location.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{derive_seeds, SweepSpec};
use crate::data::BYTE_VOCAB;
use crate::model::{ModelConfig, PositionalMode};
use crate::recurrence::RecurrenceStrategy;
use crate::train::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: String,
        source: serde_json::Error,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("unknown preset {0:?} (available: {})", PRESETS.join(", "))]
    UnknownPreset(String),
}

pub type Result<T, E = ConfigError> = std::result::Result<T, E>;

pub const PRESETS: [&str; 4] = ["paper-small", "paper-large", "desk-small", "tiny"];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub paths: Vec<PathBuf>,
    pub test_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub strategies: Vec<RecurrenceStrategy>,
    /// Positional modes to cross with the strategies; empty uses the model's.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pos_modes: Vec<PositionalMode>,
    /// Explicit run seeds. When empty, `n_seeds` are derived from the train seed.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_seeds: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub strategy: RecurrenceStrategy,
    pub data: DataConfig,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let data = DataConfig {
            paths: vec![PathBuf::from("corpus.txt")],
            test_fraction: 0.1,
        };
        let output_dir = PathBuf::from("runs").join(name);
        let cfg = match name {
            "paper-small" => RunConfig {
                model: ModelConfig::paper_small(PositionalMode::rope()),
                train: TrainConfig::paper_small(),
                strategy: RecurrenceStrategy::Baseline,
                data,
                output_dir,
                precision: Precision::F32,
                sweep: None,
            },
            "paper-large" => RunConfig {
                model: ModelConfig::paper_large(PositionalMode::rope()),
                train: TrainConfig::paper_large(),
                strategy: RecurrenceStrategy::ilr(&[1, 2, 1, 1, 1, 1, 1, 1]).expect("valid map"),
                data,
                output_dir,
                precision: Precision::F32,
                sweep: None,
            },
            "desk-small" => RunConfig {
                model: ModelConfig::desk_small(PositionalMode::rope()),
                train: TrainConfig::desk_small(),
                strategy: RecurrenceStrategy::Baseline,
                data,
                output_dir,
                precision: Precision::F32,
                sweep: Some(SweepConfig {
                    strategies: vec![
                        RecurrenceStrategy::Baseline,
                        RecurrenceStrategy::ilr(&[2, 1, 1, 1]).expect("valid map"),
                        RecurrenceStrategy::ilr(&[1, 1, 1, 2]).expect("valid map"),
                    ],
                    pos_modes: vec![],
                    seeds: vec![0, 1, 2],
                    n_seeds: None,
                }),
            },
            "tiny" => RunConfig {
                model: ModelConfig {
                    vocab_size: BYTE_VOCAB,
                    ..ModelConfig::tiny(PositionalMode::rope())
                },
                train: TrainConfig {
                    total_steps: 20,
                    batch_size: 4,
                    seq_len: 8,
                    learning_rate: 1e-2,
                    ..TrainConfig::desk_small()
                },
                strategy: RecurrenceStrategy::ilr(&[2, 1]).expect("valid map"),
                data,
                output_dir,
                precision: Precision::F64,
                sweep: None,
            },
            other => return Err(ConfigError::UnknownPreset(other.to_string())),
        };
        Ok(cfg)
    }

    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|source| ConfigError::Parse {
            path: origin.to_string(),
            source,
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text, &path.display().to_string())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        self.model.validate().map_err(|e| invalid(&e))?;
        self.train.validate().map_err(|e| invalid(&e))?;
        self.strategy.validate(&self.model).map_err(|e| invalid(&e))?;
        if self.train.seq_len > self.model.max_seq_len {
            return Err(ConfigError::Invalid(format!(
                "train.seq_len {} exceeds model.max_seq_len {}",
                self.train.seq_len, self.model.max_seq_len
            )));
        }
        if !(self.data.test_fraction > 0.0 && self.data.test_fraction < 0.5) {
            return Err(ConfigError::Invalid(format!(
                "data.test_fraction must lie in (0, 0.5), got {}",
                self.data.test_fraction
            )));
        }
        if self.data.paths.is_empty() {
            return Err(ConfigError::Invalid("data.paths is empty".into()));
        }
        if let Some(s) = &self.sweep {
            if s.strategies.is_empty() {
                return Err(ConfigError::Invalid("sweep.strategies is empty".into()));
            }
            for st in &s.strategies {
                st.validate(&self.model)
                    .map_err(|e| ConfigError::Invalid(format!("sweep strategy {st}: {e}")))?;
            }
            if s.seeds.is_empty() && s.n_seeds.unwrap_or(0) == 0 {
                return Err(ConfigError::Invalid("sweep needs seeds or n_seeds ≥ 1".into()));
            }
        }
        Ok(())
    }

    /// The sweep described by the `sweep` section, if any.
    pub fn sweep_spec(&self, jobs: usize) -> Option<SweepSpec> {
        let s = self.sweep.as_ref()?;
        let seeds = if s.seeds.is_empty() {
            derive_seeds(self.train.seed, s.n_seeds.unwrap_or(0))
        } else {
            s.seeds.clone()
        };
        Some(SweepSpec {
            model: self.model.clone(),
            train: self.train.clone(),
            strategies: s.strategies.clone(),
            pos_modes: s.pos_modes.clone(),
            seeds,
            jobs,
        })
    }
}
