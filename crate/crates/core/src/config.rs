//! Sectioned TOML run configuration.
//!
//! ```toml
//! [space]
//! m = 4
//! n = 8
//! kind = "uniform"
//!
//! [schedule]
//! kind = "linear"
//! sigma_min = 0.001
//! sigma_max = 5.0
//! horizon = 1.0
//!
//! [reward]
//! name = "motif_count"
//! pattern = [0, 0]
//! ```
//!
//! Every other section is optional and falls back to its defaults. Unknown keys
//! are rejected, and `parse(render(c)) == c` for every valid config.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ctmc::{
    build_generator, GeneratorKind, NoiseSchedule, ScheduleKind, SequenceSpec, TokenGenerator,
    Vocab,
};
use crate::error::{Error, Result};
use crate::estimators::{Reward, RewardSpec};
use crate::sampler::{SamplerConfig, StepRule};
use crate::score::ScoreParams;
use crate::trainer::{PretrainConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpaceSection {
    pub m: usize,
    pub n: usize,
    pub kind: GeneratorKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_index: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub kind: ScheduleKind,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub horizon: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Linear,
            sigma_min: 1e-3,
            sigma_max: 5.0,
            horizon: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// Piecewise-constant time buckets of the score table.
    pub n_buckets: usize,
    pub shared_positions: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            n_buckets: 1,
            shared_positions: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    /// Reverse-time stopping point `T0`; defaults to the horizon.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t0: Option<f64>,
    pub n_steps: usize,
    pub n_corrector: usize,
    pub corrector_after_t0: usize,
    /// `"euler"` or `"exponential"` predictor steps.
    pub step_rule: StepRule,
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self {
            t0: None,
            n_steps: 128,
            n_corrector: 0,
            corrector_after_t0: 0,
            step_rule: StepRule::Euler,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    /// Training sequences, one per line.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    pub checkpoint_dir: PathBuf,
    pub log_dir: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            dataset: None,
            checkpoint_dir: "checkpoints".into(),
            log_dir: "logs".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub space: SpaceSection,
    #[serde(default)]
    pub schedule: ScheduleSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub sampler: SamplerSection,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward: Option<RewardSpec>,
    #[serde(default)]
    pub paths: PathsSection,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn render(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Hash of the canonical rendering; insensitive to formatting and comments.
    pub fn hash(&self) -> Result<String> {
        Ok(crate::hash_hex(&self.render()?))
    }

    pub fn validate(&self) -> Result<()> {
        let sched = self.schedule()?;
        self.spec()?;
        self.generator()?;
        self.sampler_config(0).validate(&sched)?;
        self.train.validate()?;
        if self.model.n_buckets == 0 {
            return Err(Error::config("model.n_buckets must be >= 1"));
        }
        if let Some(r) = &self.reward {
            Reward::from_spec(r)?;
        }
        Ok(())
    }

    pub fn spec(&self) -> Result<SequenceSpec> {
        SequenceSpec::new(
            self.space.n,
            Vocab::new(self.space.m, self.space.mask_index)?,
        )
    }

    pub fn generator(&self) -> Result<TokenGenerator> {
        build_generator(self.space.kind, self.spec()?.vocab())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        let s = &self.schedule;
        NoiseSchedule::new(s.kind, s.sigma_min, s.sigma_max, s.horizon)
    }

    pub fn sampler_config(&self, seed: u64) -> SamplerConfig {
        let horizon = self.schedule.horizon;
        SamplerConfig {
            horizon,
            t0: self.sampler.t0.unwrap_or(horizon),
            n_steps: self.sampler.n_steps,
            n_corrector: self.sampler.n_corrector,
            corrector_after_t0: self.sampler.corrector_after_t0,
            seed,
            step_rule: self.sampler.step_rule,
        }
    }

    pub fn reward(&self) -> Result<Reward> {
        let spec = self
            .reward
            .as_ref()
            .ok_or_else(|| Error::config("missing [reward] section"))?;
        Reward::from_spec(spec)
    }

    /// Zero-initialized score table for this space and model section.
    pub fn init_params(&self) -> Result<ScoreParams> {
        ScoreParams::new(
            self.spec()?,
            self.space.kind,
            self.schedule.horizon,
            self.model.n_buckets,
            self.model.shared_positions,
        )
    }

    /// Resolves `path` against the directory holding the config file.
    pub fn resolve(base: &Path, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            base.parent().unwrap_or_else(|| Path::new(".")).join(path)
        }
    }
}
