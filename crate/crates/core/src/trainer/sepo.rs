//! The fine-tuning loop: sample from frozen parameters, score and standardize,
//! take `K` optimizer steps on the clipped surrogate, refresh the snapshot.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::optim::{Optimizer, OptimizerKind, StepSchedule};
use crate::ctmc::{NoiseSchedule, TokenGenerator, DEFAULT_ORACLE_CAP};
use crate::error::{Error, Result};
use crate::estimators::{
    group_advantages, path_kl, surrogate_loss, EmaBaseline, HForm, NeighborScope, Reward,
    RolloutBatch, SnisContext, SnisSettings, Variant,
};
use crate::implicit::corrected_gradient;
use crate::sampler::{
    corrector_step, sample_terminals, sample_trajectory, trajectory_rng, SamplerConfig, Trajectory,
};
use crate::score::ScoreModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Outer iterations `S`.
    pub iterations: usize,
    /// Optimizer steps per iteration `K`.
    pub epochs: usize,
    /// Rollouts per iteration `N`.
    pub batch_size: usize,
    /// GRPO group size `G`; must divide `batch_size`.
    pub group_size: usize,
    /// Clip ratio `eps`.
    pub clip_eps: f64,
    /// Weight `alpha` of the path-KL term.
    pub kl_weight: f64,
    pub lr: f64,
    pub variant: Variant,
    /// Sample with correctors and use the implicit (sparsemax) gradient.
    pub gf_mode: bool,
    pub step_schedule: StepSchedule,
    pub optimizer: OptimizerKind,
    pub h_form: HForm,
    pub scope: NeighborScope,
    /// Decay of the moving-average baseline used by the PPO variant.
    pub baseline_decay: f64,
    /// SNIS settings; `samples` is `M`.
    pub snis: SnisSettings,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 40,
            epochs: 2,
            batch_size: 8,
            group_size: 8,
            clip_eps: 0.2,
            kl_weight: 0.05,
            lr: 1e-4,
            variant: Variant::Grpo,
            gf_mode: false,
            step_schedule: StepSchedule::Constant,
            optimizer: OptimizerKind::Adam,
            h_form: HForm::AsPrinted,
            scope: NeighborScope::Hamming,
            baseline_decay: 0.99,
            snis: SnisSettings::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.snis.samples == 0 {
            return Err(Error::config(
                "epochs, batch_size and snis.samples must be >= 1",
            ));
        }
        if !(self.clip_eps > 0.0) {
            return Err(Error::config("clip_eps must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config("lr must be positive"));
        }
        if !(self.kl_weight >= 0.0) {
            return Err(Error::config("kl_weight must be nonnegative"));
        }
        if !(0.0..=1.0).contains(&self.baseline_decay) {
            return Err(Error::config("baseline_decay must lie in [0, 1]"));
        }
        if self.variant == Variant::Grpo
            && (self.group_size < 2 || !self.batch_size.is_multiple_of(self.group_size))
        {
            return Err(Error::config(format!(
                "batch_size {} must be a multiple of group_size {} (>= 2)",
                self.batch_size, self.group_size
            )));
        }
        Ok(())
    }
}

/// One row of the metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub mean_reward: f64,
    pub median_reward: f64,
    pub surrogate_loss: f64,
    pub path_kl: f64,
    /// Norm of the first-epoch gradient, taken at the snapshot parameters.
    pub grad_norm: f64,
    /// Clip fraction of the last epoch.
    pub clip_frac: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, Default)]
pub struct RunLog {
    pub records: Vec<IterationRecord>,
    /// Per iteration: the clip fraction of every epoch.
    pub epoch_clip_fracs: Vec<Vec<f64>>,
    /// Per iteration: hash of the parameters the rollouts were drawn from.
    pub sample_hashes: Vec<String>,
    /// Per iteration: hash of the frozen parameters seen by every epoch.
    pub epoch_snapshot_hashes: Vec<Vec<String>>,
    /// Iterations aborted by a sampler error, with the message.
    pub failures: Vec<(usize, String)>,
    /// Degenerate (zero-spread) GRPO groups skipped, summed over iterations.
    pub degenerate_groups: usize,
    pub step_schedule: Option<StepSchedule>,
}

pub const CSV_COLUMNS: [&str; 8] = [
    "iter",
    "mean_reward",
    "median_reward",
    "surrogate_loss",
    "path_kl",
    "grad_norm",
    "clip_frac",
    "wall_ms",
];

impl RunLog {
    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        if self.records.is_empty() {
            w.write_record(CSV_COLUMNS)
                .map_err(|e| Error::Parse(e.to_string()))?;
        }
        for r in &self.records {
            w.serialize(r).map_err(|e| Error::Parse(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Parse(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string()?)?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput<S> {
    pub params: S,
    pub log: RunLog,
}

/// First 16 hex digits of the SHA-256 of the parameter bit patterns.
pub fn params_hash(params: &[f64]) -> String {
    let text: String = params
        .iter()
        .map(|p| format!("{:016x}", p.to_bits()))
        .collect();
    crate::hash_hex(&text)
}

fn iteration_seed(seed: u64, s: usize) -> u64 {
    seed ^ (s as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// `N` rollouts from `score`. In gradient-flow mode every predictor step is
/// followed by at least one corrector step, and `corrector_after_t0` extra
/// steps are applied to the terminal state.
fn rollouts<S: ScoreModel + ?Sized>(
    sampler: &SamplerConfig,
    score: &S,
    g: &TokenGenerator,
    sched: &NoiseSchedule,
    count: usize,
    gf_mode: bool,
) -> Result<(Vec<Trajectory>, Vec<Vec<usize>>)> {
    let mut cfg = *sampler;
    if gf_mode {
        cfg.n_corrector = cfg.n_corrector.max(1);
    }
    let mut trajs = Vec::with_capacity(count);
    let mut samples = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = trajectory_rng(cfg.seed, i as u64);
        let traj = sample_trajectory(&cfg, score, g, sched, None, &mut rng)?;
        let mut x = traj.terminal().to_vec();
        if gf_mode {
            for _ in 0..cfg.corrector_after_t0 {
                x = corrector_step(&x, cfg.stop_time(), cfg.dt(), score, g, sched, &mut rng)?;
            }
        }
        trajs.push(traj);
        samples.push(x);
    }
    Ok((trajs, samples))
}

/// Loss gradient through the sparsemax fixed point.
///
/// On the set `V` of distinct non-skipped samples, with empirical weights
/// `pi`, the policy Jacobian rows are `J_x = -pi(x) sum_y q(y) grad log s(x)_y`.
/// They are passed through [`corrected_gradient`] with `k_h = |V|` and
/// contracted with the per-state mean advantage: `-sum_x A(x) X_x`.
pub fn implicit_policy_gradient<S: ScoreModel + Clone>(
    batch: &RolloutBatch<S>,
    current: &S,
) -> Result<Vec<f64>> {
    let p = current.num_params();
    let t = batch.eval_time();
    let mut states: BTreeMap<&[usize], (usize, usize, f64)> = BTreeMap::new();
    for (k, x) in batch.samples.iter().enumerate() {
        if batch.skip[k] {
            continue;
        }
        let e = states.entry(x.as_slice()).or_insert((k, 0, 0.0));
        e.1 += 1;
        e.2 += batch.advantages[k];
    }
    let used: usize = states.values().map(|e| e.1).sum();
    let mut grad = vec![0.0; p];
    if used == 0 {
        return Ok(grad);
    }
    let d = states.len();
    let pi: Vec<f64> = states.values().map(|e| e.1 as f64 / used as f64).collect();
    let mut jac = vec![0.0; d * p];
    for (j, (x, e)) in states.iter().enumerate() {
        let row = &mut jac[j * p..(j + 1) * p];
        for y in &batch.targets[e.0] {
            let q = batch.snis.new_value(y)?;
            current.add_grad_full_log_ratio(x, y, t, -pi[j] * q, row)?;
        }
    }
    let x = corrected_gradient(&pi, &jac, p, d)?;
    for (j, e) in states.values().enumerate() {
        let a = e.2 / e.1 as f64;
        for c in 0..p {
            grad[c] -= a * x[j * p + c];
        }
    }
    Ok(grad)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Runs `cfg.iterations` rounds of rollout, advantage estimation and `K`
/// descent steps on the clipped surrogate (plus `alpha` times the path KL to
/// `pre`), starting from `pre`.
pub fn sepo_train<S: ScoreModel + Clone>(
    pre: &S,
    reward: &Reward,
    g: &TokenGenerator,
    sched: &NoiseSchedule,
    sampler: &SamplerConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutput<S>> {
    cfg.validate()?;
    sampler.validate(sched)?;
    let mut current = pre.clone();
    let mut log = RunLog {
        step_schedule: Some(cfg.step_schedule),
        ..Default::default()
    };
    if cfg.iterations == 0 {
        return Ok(TrainOutput {
            params: current,
            log,
        });
    }
    let ctx = SnisContext::new(
        *pre.spec(),
        g,
        sched,
        sampler.stop_time(),
        cfg.snis,
        DEFAULT_ORACLE_CAP,
    )?;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, pre.num_params())?;
    let mut baseline = EmaBaseline::new(cfg.baseline_decay);
    for s in 1..=cfg.iterations {
        let start = Instant::now();
        let old = current.clone();
        let old_hash = params_hash(old.params());
        let seed = iteration_seed(cfg.seed, s);
        let scfg = SamplerConfig { seed, ..*sampler };
        let (trajectories, samples) =
            match rollouts(&scfg, &old, g, sched, cfg.batch_size, cfg.gf_mode) {
                Ok(r) => r,
                Err(e @ Error::StepSize { .. }) => {
                    log.failures.push((s, e.to_string()));
                    continue;
                }
                Err(e) => return Err(e),
            };
        let rewards: Vec<f64> = samples.iter().map(|x| reward.eval(x)).collect();
        let (advantages, skip) = match cfg.variant {
            Variant::Grpo => group_advantages(&rewards, cfg.group_size)?,
            Variant::Ppo => (baseline.advantages(&rewards), vec![false; rewards.len()]),
        };
        if cfg.variant == Variant::Grpo {
            log.degenerate_groups += skip.iter().filter(|&&f| f).count() / cfg.group_size;
        }
        let (mean_reward, median_reward) = (mean(&rewards), median(&rewards));
        let mut rng = trajectory_rng(seed, u64::MAX);
        let mut batch = RolloutBatch::new(
            samples,
            trajectories,
            rewards,
            advantages,
            skip,
            old,
            ctx.clone(),
            cfg.scope,
            DEFAULT_ORACLE_CAP,
            &mut rng,
        )?;
        let mut hashes = Vec::with_capacity(cfg.epochs);
        let mut clip_fracs = Vec::with_capacity(cfg.epochs);
        let (mut loss, mut kl_value, mut grad_norm) = (0.0, 0.0, 0.0);
        for k in 0..cfg.epochs {
            let h = params_hash(batch.old.params());
            if h != old_hash {
                return Err(Error::InternalState(
                    "frozen rollout parameters changed".into(),
                ));
            }
            hashes.push(h);
            batch.refresh(&current)?;
            let sur = surrogate_loss(&batch, &current, cfg.clip_eps, cfg.h_form)?;
            let mut grad = if cfg.gf_mode {
                implicit_policy_gradient(&batch, &current)?
            } else {
                sur.grad
            };
            loss = sur.loss;
            if cfg.kl_weight > 0.0 || k + 1 == cfg.epochs {
                let kl = path_kl(&current, pre, &batch.trajectories, g, sched)?;
                kl_value = kl.value;
                if cfg.kl_weight > 0.0 {
                    grad.iter_mut()
                        .zip(&kl.grad)
                        .for_each(|(a, b)| *a += cfg.kl_weight * b);
                    loss += cfg.kl_weight * kl.value;
                }
            }
            if k == 0 {
                grad_norm = norm(&grad);
            }
            clip_fracs.push(sur.clip_frac);
            let mut theta = current.params().to_vec();
            opt.step(&mut theta, &grad, cfg.step_schedule.factor(s))?;
            current.set_params(&theta)?;
        }
        log.records.push(IterationRecord {
            iter: s,
            mean_reward,
            median_reward,
            surrogate_loss: loss,
            path_kl: kl_value,
            grad_norm,
            clip_frac: *clip_fracs.last().unwrap_or(&0.0),
            wall_ms: start.elapsed().as_millis() as u64,
        });
        log.epoch_clip_fracs.push(clip_fracs);
        log.sample_hashes.push(old_hash);
        log.epoch_snapshot_hashes.push(hashes);
    }
    Ok(TrainOutput {
        params: current,
        log,
    })
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

/// Median with the midpoint rule on even counts.
pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub mean: f64,
    pub median: f64,
    /// Population standard deviation.
    pub std: f64,
    pub samples: Vec<Vec<usize>>,
    pub rewards: Vec<f64>,
}

/// Draws `n_samples` terminal samples (seeded by `sampler.seed`) and
/// summarizes their rewards.
pub fn evaluate_policy<S: ScoreModel + ?Sized>(
    score: &S,
    reward: &Reward,
    n_samples: usize,
    sampler: &SamplerConfig,
    g: &TokenGenerator,
    sched: &NoiseSchedule,
) -> Result<EvalSummary> {
    if n_samples == 0 {
        return Err(Error::config("n_samples must be >= 1"));
    }
    let samples = sample_terminals(sampler, score, g, sched, n_samples)?;
    let rewards: Vec<f64> = samples.iter().map(|x| reward.eval(x)).collect();
    let mu = mean(&rewards);
    let std = (rewards.iter().map(|r| (r - mu).powi(2)).sum::<f64>() / rewards.len() as f64).sqrt();
    Ok(EvalSummary {
        mean: mu,
        median: median(&rewards),
        std,
        samples,
        rewards,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradTrace {
    /// Running mean of the squared gradient norm after each iteration.
    pub running: Vec<f64>,
    /// Least-squares slope of `log running` against `log s` over the iterations
    /// where the running mean is positive; `None` when it is identically zero.
    pub slope: Option<f64>,
    /// Whether the run used the decaying step schedule the rate refers to.
    pub in_hypothesis: bool,
}

pub fn gradient_norm_trace(log: &RunLog) -> Result<GradTrace> {
    const MIN_ITERS: usize = 16;
    if log.records.len() < MIN_ITERS {
        return Err(Error::Length {
            need: MIN_ITERS,
            got: log.records.len(),
        });
    }
    let mut running = Vec::with_capacity(log.records.len());
    let mut acc = 0.0;
    for (k, r) in log.records.iter().enumerate() {
        acc += r.grad_norm * r.grad_norm;
        running.push(acc / (k + 1) as f64);
    }
    // The running mean is nondecreasing while it is zero, so the defined part is a suffix.
    let first = running.iter().position(|v| *v > 0.0);
    let slope = match first {
        Some(k0) if running.len() - k0 >= 2 && running.iter().all(|v| v.is_finite()) => {
            let xs: Vec<f64> = (k0 + 1..=running.len()).map(|s| (s as f64).ln()).collect();
            let ys: Vec<f64> = running[k0..].iter().map(|v| v.ln()).collect();
            Some(least_squares_slope(&xs, &ys))
        }
        _ => None,
    };
    Ok(GradTrace {
        running,
        slope,
        in_hypothesis: log.step_schedule == Some(StepSchedule::InvSqrt),
    })
}

pub fn least_squares_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let (mx, my) = (mean(xs), mean(ys));
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}
