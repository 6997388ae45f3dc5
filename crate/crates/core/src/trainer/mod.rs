//! Pretraining, the fine-tuning loop, evaluation and run artifacts.

mod optim;
mod pretrain;
mod sepo;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use optim::{Optimizer, OptimizerKind, StepSchedule};
pub use pretrain::{format_sequences, parse_sequences, pretrain_score, PretrainConfig, Pretrained};
pub use sepo::{
    evaluate_policy, gradient_norm_trace, implicit_policy_gradient, least_squares_slope, mean,
    median, params_hash, sepo_train, EvalSummary, GradTrace, IterationRecord, RunLog, TrainConfig,
    TrainOutput, CSV_COLUMNS,
};

/// Reproducibility record written next to run outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    pub outputs: Vec<String>,
}

impl Manifest {
    pub fn new(command: &str, config_hash: &str, seed: u64, outputs: Vec<String>) -> Self {
        Self {
            command: command.to_string(),
            config_hash: config_hash.to_string(),
            seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            outputs,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Parse(e.to_string()))
    }
}
