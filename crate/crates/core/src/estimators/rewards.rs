//! Deterministic, non-differentiable rewards on token sequences.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reward selection as written in config files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardSpec {
    pub name: String,
    /// `motif_count`: the token pattern to count (overlapping occurrences).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pattern: Option<Vec<usize>>,
    /// `target_composition`: the token whose frequency is scored.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token: Option<usize>,
    /// `target_composition`: the desired frequency in `[0, 1]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<f64>,
    /// `constant`: the value returned for every sequence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
}

impl RewardSpec {
    pub fn motif(pattern: Vec<usize>) -> Self {
        Self {
            name: "motif_count".into(),
            pattern: Some(pattern),
            token: None,
            target: None,
            value: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Reward {
    /// Number of (overlapping) occurrences of `pattern` as a contiguous block.
    MotifCount {
        pattern: Vec<usize>,
    },
    /// `-|freq(token) - target|`.
    TargetComposition {
        token: usize,
        target: f64,
    },
    /// 1 when the token sum is even, else 0.
    Parity,
    Constant(f64),
}

/// Registered reward names.
pub const REWARD_NAMES: &[&str] = &["motif_count", "target_composition", "parity", "constant"];

impl Reward {
    pub fn from_spec(spec: &RewardSpec) -> Result<Self> {
        let missing = |field: &str| Error::config(format!("reward {} needs `{field}`", spec.name));
        match spec.name.as_str() {
            "motif_count" => {
                let pattern = spec.pattern.clone().ok_or_else(|| missing("pattern"))?;
                if pattern.is_empty() {
                    return Err(Error::config("motif pattern must be nonempty"));
                }
                Ok(Reward::MotifCount { pattern })
            }
            "target_composition" => {
                let token = spec.token.ok_or_else(|| missing("token"))?;
                let target = spec.target.ok_or_else(|| missing("target"))?;
                if !(0.0..=1.0).contains(&target) {
                    return Err(Error::config("composition target must lie in [0, 1]"));
                }
                Ok(Reward::TargetComposition { token, target })
            }
            "parity" => Ok(Reward::Parity),
            "constant" => Ok(Reward::Constant(
                spec.value.ok_or_else(|| missing("value"))?,
            )),
            other => Err(Error::config(format!(
                "unknown reward {other:?}; expected one of {REWARD_NAMES:?}"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Reward::MotifCount { .. } => "motif_count",
            Reward::TargetComposition { .. } => "target_composition",
            Reward::Parity => "parity",
            Reward::Constant(_) => "constant",
        }
    }

    pub fn eval(&self, x: &[usize]) -> f64 {
        match self {
            Reward::MotifCount { pattern } => {
                if pattern.len() > x.len() {
                    return 0.0;
                }
                x.windows(pattern.len()).filter(|w| w == pattern).count() as f64
            }
            Reward::TargetComposition { token, target } => {
                let freq = x.iter().filter(|&&a| a == *token).count() as f64 / x.len() as f64;
                -(freq - target).abs()
            }
            Reward::Parity => {
                if x.iter().sum::<usize>() % 2 == 0 {
                    1.0
                } else {
                    0.0
                }
            }
            Reward::Constant(c) => *c,
        }
    }

    /// `sup |R|` over sequences of length `n`.
    pub fn max_abs(&self, n: usize) -> f64 {
        match self {
            Reward::MotifCount { pattern } => (n + 1).saturating_sub(pattern.len()) as f64,
            Reward::TargetComposition { target, .. } => target.max(1.0 - target),
            Reward::Parity => 1.0,
            Reward::Constant(c) => c.abs(),
        }
    }
}
