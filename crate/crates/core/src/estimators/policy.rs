//! Policy-gradient estimators on a rollout batch: REINFORCE with concrete
//! scores, the importance-sampled estimator, and the clipped PPO/GRPO surrogate.
//!
//! All estimators return gradients of the loss `l = -E[R]`; the trainer
//! descends them.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::snis::{SnisCache, SnisContext};
use crate::error::{Error, Result};
use crate::oracle::IndexCodec;
use crate::sampler::Trajectory;
use crate::score::ScoreModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Ppo,
    Grpo,
}

/// Which targets `y != x` enter the inner sum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeighborScope {
    /// Hamming-1 neighbors only (what a concrete score provides).
    Hamming,
    /// Every other state; needs a full-space score and an enumerable space.
    Full,
}

/// Weight of a target in the importance-sampled estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HForm {
    /// `q_new(y) * u`: the form of the estimator as stated.
    AsPrinted,
    /// `q_old(y) * u`: keeps a single current-parameter factor, inside `u`.
    SingleFactor,
}

/// `(r - mean) / std` with the population standard deviation.
/// A group with zero spread returns zeros and `true`.
pub fn grpo_advantages(rewards: &[f64]) -> Result<(Vec<f64>, bool)> {
    if rewards.len() < 2 {
        return Err(Error::Length {
            need: 2,
            got: rewards.len(),
        });
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if !(std > 1e-12 * mean.abs().max(1.0)) {
        return Ok((vec![0.0; rewards.len()], true));
    }
    Ok((rewards.iter().map(|r| (r - mean) / std).collect(), false))
}

/// Per-group standardized advantages over consecutive groups of size `group`.
/// Returns the advantages and a per-sample flag marking degenerate groups.
pub fn group_advantages(rewards: &[f64], group: usize) -> Result<(Vec<f64>, Vec<bool>)> {
    if group < 2 || !rewards.len().is_multiple_of(group) {
        return Err(Error::config(format!(
            "batch size {} must be a multiple of a group size >= 2 (got {group})",
            rewards.len()
        )));
    }
    let mut adv = Vec::with_capacity(rewards.len());
    let mut flags = Vec::with_capacity(rewards.len());
    for chunk in rewards.chunks(group) {
        let (a, degenerate) = grpo_advantages(chunk)?;
        adv.extend(a);
        flags.extend(std::iter::repeat_n(degenerate, group));
    }
    Ok((adv, flags))
}

/// Scalar exponential-moving-average baseline, initialized to the first batch mean.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaBaseline {
    pub decay: f64,
    pub value: Option<f64>,
}

impl EmaBaseline {
    pub fn new(decay: f64) -> Self {
        Self { decay, value: None }
    }

    /// `R - b` with the current baseline, then folds this batch into `b`.
    pub fn advantages(&mut self, rewards: &[f64]) -> Vec<f64> {
        let mean = rewards.iter().sum::<f64>() / rewards.len().max(1) as f64;
        let b = *self.value.get_or_insert(mean);
        self.value = Some(self.decay * b + (1.0 - self.decay) * mean);
        rewards.iter().map(|r| r - b).collect()
    }
}

/// `min(clip(u, 1-eps, 1+eps) A, u A)`.
pub fn clipped_weight_ppo(u: f64, a: f64, eps: f64) -> f64 {
    (u.clamp(1.0 - eps, 1.0 + eps) * a).min(u * a)
}

/// `(q_new(y) / q_old(y)) * (s_old(x)_y / s_new(x)_y)`.
#[allow(clippy::too_many_arguments)]
pub fn is_ratio<S: ScoreModel + ?Sized>(
    x: &[usize],
    y: &[usize],
    score_new: &S,
    score_old: &S,
    snis_new_y: f64,
    snis_old_y: f64,
    t: f64,
) -> Result<f64> {
    if !(snis_new_y > 0.0 && snis_old_y > 0.0) {
        return Err(Error::domain("marginal estimates must be positive"));
    }
    let ln_new = score_new.full_log_ratio(x, y, t)?;
    let ln_old = score_old.full_log_ratio(x, y, t)?;
    if !(ln_new.is_finite() && ln_old.is_finite()) {
        return Err(Error::domain("score ratios must be positive"));
    }
    Ok(snis_new_y / snis_old_y * (ln_old - ln_new).exp())
}

/// Targets `y` in `scope` with a positive score `s(x, t)_y`.
pub fn scope_targets<S: ScoreModel + ?Sized>(
    score: &S,
    x: &[usize],
    t: f64,
    scope: NeighborScope,
    cap: usize,
) -> Result<Vec<Vec<usize>>> {
    let mut out = Vec::new();
    match scope {
        NeighborScope::Hamming => {
            let table = score.eval_score(x, t)?;
            for (i, b, v) in table.neighbors() {
                if v > 0.0 {
                    let mut y = x.to_vec();
                    y[i] = b;
                    out.push(y);
                }
            }
        }
        NeighborScope::Full => {
            if !score.supports_full_space() {
                return Err(Error::Unsupported(
                    "full neighbor scope needs a full-space score".into(),
                ));
            }
            let codec = IndexCodec::new(*score.spec(), cap)?;
            let own = codec.encode(x);
            for idx in (0..codec.num_states()).filter(|&i| i != own) {
                let y = codec.decode(idx);
                if score.full_log_ratio(x, &y, t)?.is_finite() {
                    out.push(y);
                }
            }
        }
    }
    Ok(out)
}

/// One SEPO rollout: terminal samples from the frozen parameters, their
/// rewards and advantages, and SNIS marginals for every target.
#[derive(Debug, Clone)]
pub struct RolloutBatch<S> {
    pub samples: Vec<Vec<usize>>,
    pub trajectories: Vec<Trajectory>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    /// Samples excluded from the surrogate (degenerate GRPO groups).
    pub skip: Vec<bool>,
    /// Frozen parameters the samples were drawn from.
    pub old: S,
    pub scope: NeighborScope,
    pub targets: Vec<Vec<Vec<usize>>>,
    pub snis: SnisCache,
    pub ctx: SnisContext,
}

impl<S: ScoreModel + Clone> RolloutBatch<S> {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        samples: Vec<Vec<usize>>,
        trajectories: Vec<Trajectory>,
        rewards: Vec<f64>,
        advantages: Vec<f64>,
        skip: Vec<bool>,
        old: S,
        ctx: SnisContext,
        scope: NeighborScope,
        cap: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let n = samples.len();
        if rewards.len() != n || advantages.len() != n || skip.len() != n {
            return Err(Error::domain(
                "rollout arrays must all have one entry per sample",
            ));
        }
        if advantages.iter().any(|a| !a.is_finite()) {
            return Err(Error::domain("advantages must be finite"));
        }
        let t = ctx.time();
        let targets = samples
            .iter()
            .map(|x| scope_targets(&old, x, t, scope, cap))
            .collect::<Result<Vec<_>>>()?;
        let snis = SnisCache::build(&ctx, targets.iter().flatten(), &old, rng)?;
        Ok(Self {
            samples,
            trajectories,
            rewards,
            advantages,
            skip,
            old,
            scope,
            targets,
            snis,
            ctx,
        })
    }

    /// Forward time at which scores are evaluated, `T - T0`.
    pub fn eval_time(&self) -> f64 {
        self.ctx.time()
    }

    /// Recomputes the current-parameter marginals on the shared proposals.
    pub fn refresh(&mut self, current: &S) -> Result<()> {
        self.snis.refresh_new(&self.ctx, current)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// `mean_x R(x) sum_{y != x} q(y) grad log s(x, t)_y`, with `q` the cached
/// marginals of the parameters the batch was drawn from (`score`).
pub fn reinforce_gradient<S: ScoreModel + Clone>(
    batch: &RolloutBatch<S>,
    score: &S,
) -> Result<Vec<f64>> {
    let t = batch.eval_time();
    let mut grad = vec![0.0; score.num_params()];
    for ((x, r), targets) in batch.samples.iter().zip(&batch.rewards).zip(&batch.targets) {
        if *r == 0.0 {
            continue;
        }
        for y in targets {
            let q = batch.snis.old_value(y)?;
            score.add_grad_full_log_ratio(x, y, t, r * q, &mut grad)?;
        }
    }
    let n = batch.len().max(1) as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    Ok(grad)
}

/// Importance-sampled estimator `mean_x R(x) sum_y w(y) u_{x,y} grad log s_new(x, t)_y`
/// for samples drawn from the frozen parameters.
pub fn is_gradient<S: ScoreModel + Clone>(
    batch: &RolloutBatch<S>,
    current: &S,
    form: HForm,
) -> Result<Vec<f64>> {
    let t = batch.eval_time();
    let mut grad = vec![0.0; current.num_params()];
    for ((x, r), targets) in batch.samples.iter().zip(&batch.rewards).zip(&batch.targets) {
        if *r == 0.0 {
            continue;
        }
        for y in targets {
            let (q_new, q_old) = (batch.snis.new_value(y)?, batch.snis.old_value(y)?);
            let u = is_ratio(x, y, current, &batch.old, q_new, q_old, t)?;
            let w = match form {
                HForm::AsPrinted => q_new,
                HForm::SingleFactor => q_old,
            };
            current.add_grad_full_log_ratio(x, y, t, r * w * u, &mut grad)?;
        }
    }
    let n = batch.len().max(1) as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    Ok(grad)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateOutput {
    pub loss: f64,
    pub grad: Vec<f64>,
    /// Fraction of `(x, y)` pairs with `u` outside `[1 - eps, 1 + eps]`.
    pub clip_frac: f64,
    pub pairs: usize,
}

/// Clipped surrogate `mean_x sum_y w_{x,y} log s_new(x, t)_y` with
/// `w = q(y) min(clip(u) A, u A)`. Only `log s_new` carries gradient.
pub fn surrogate_loss<S: ScoreModel + Clone>(
    batch: &RolloutBatch<S>,
    current: &S,
    eps: f64,
    form: HForm,
) -> Result<SurrogateOutput> {
    if !(eps > 0.0) {
        return Err(Error::config("clip ratio must be positive"));
    }
    let t = batch.eval_time();
    let mut grad = vec![0.0; current.num_params()];
    let (mut loss, mut pairs, mut clipped) = (0.0, 0usize, 0usize);
    for (k, (x, targets)) in batch.samples.iter().zip(&batch.targets).enumerate() {
        if batch.skip[k] {
            continue;
        }
        let a = batch.advantages[k];
        for y in targets {
            let (q_new, q_old) = (batch.snis.new_value(y)?, batch.snis.old_value(y)?);
            let u = is_ratio(x, y, current, &batch.old, q_new, q_old, t)?;
            pairs += 1;
            if u < 1.0 - eps || u > 1.0 + eps {
                clipped += 1;
            }
            if a == 0.0 {
                continue;
            }
            let q = match form {
                HForm::AsPrinted => q_new,
                HForm::SingleFactor => q_old,
            };
            let w = q * clipped_weight_ppo(u, a, eps);
            loss += w * current.full_log_ratio(x, y, t)?;
            current.add_grad_full_log_ratio(x, y, t, w, &mut grad)?;
        }
    }
    let n = batch.len().max(1) as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    let clip_frac = if pairs == 0 {
        0.0
    } else {
        clipped as f64 / pairs as f64
    };
    Ok(SurrogateOutput {
        loss: loss / n,
        grad,
        clip_frac,
        pairs,
    })
}
