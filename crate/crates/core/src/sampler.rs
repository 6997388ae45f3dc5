//! Reverse-process samplers: tau-leaping predictor, prefix-conditional
//! sampling, corrector steps and the gradient-flow sampler.
//!
//! Trajectories run in reverse time `tau` in `[0, T0]`; scores and rates are
//! evaluated at forward time `T - tau`, taken at the start of each step.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ctmc::{corrector_rates, reverse_rates, NeighborRates, NoiseSchedule, TokenGenerator};
use crate::error::{Error, Result};
use crate::score::ScoreModel;

/// How a predictor step turns frozen per-position rates into jump probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRule {
    /// `dt * rate`; fails when a position's leave probability exceeds one.
    #[default]
    Euler,
    /// `1 - exp(-dt * total)` split in proportion to the rates: exact for
    /// frozen single-position rates and never fails. Still first order, but
    /// does not overshoot where `dt * rate` is large.
    Exponential,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    /// Horizon `T`; must equal the schedule horizon.
    pub horizon: f64,
    /// Stopping time `T0` in reverse time.
    pub t0: f64,
    pub n_steps: usize,
    /// Corrector iterations after every predictor step.
    #[serde(default)]
    pub n_corrector: usize,
    /// Time-homogeneous corrector iterations at `T - T0` after the predictor.
    #[serde(default)]
    pub corrector_after_t0: usize,
    #[serde(default)]
    pub seed: u64,
    /// Rule for predictor steps; correctors always use Euler steps.
    #[serde(default)]
    pub step_rule: StepRule,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            horizon: 1.0,
            t0: 1.0,
            n_steps: 128,
            n_corrector: 0,
            corrector_after_t0: 0,
            seed: 0,
            step_rule: StepRule::Euler,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, sched: &NoiseSchedule) -> Result<()> {
        if !(self.t0 > 0.0 && self.t0 <= self.horizon) {
            return Err(Error::config(format!(
                "need 0 < T0 <= T, got T0 = {}",
                self.t0
            )));
        }
        if (self.horizon - sched.horizon()).abs() > 1e-12 * self.horizon.max(1.0) {
            return Err(Error::config(
                "sampler horizon differs from schedule horizon",
            ));
        }
        if self.n_steps == 0 {
            return Err(Error::config("n_steps must be >= 1"));
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        self.t0 / self.n_steps as f64
    }

    /// Forward time at which the process stops, `T - T0`.
    pub fn stop_time(&self) -> f64 {
        (self.horizon - self.t0).max(0.0)
    }
}

/// States visited by the predictor; `times` are reverse times.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<Vec<usize>>,
    pub times: Vec<f64>,
}

impl Trajectory {
    pub fn terminal(&self) -> &[usize] {
        self.states
            .last()
            .expect("trajectory has at least the initial state")
    }
}

/// Independent RNG stream for trajectory `index` under `seed`.
pub fn trajectory_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// One Euler step per position: `delta_{x_i} + dt * rates(i, .)`, sampled
/// simultaneously with a single uniform draw per position.
pub fn euler_jump<R: Rng + ?Sized>(
    x: &[usize],
    rates: &NeighborRates,
    dt: f64,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let mut out = x.to_vec();
    for (i, slot) in out.iter_mut().enumerate() {
        let leave = dt * rates.position_total(i);
        if leave > 1.0 + 1e-12 {
            return Err(Error::StepSize {
                dt,
                prob: 1.0 - leave,
            });
        }
        let u: f64 = rng.gen();
        if u >= leave {
            continue;
        }
        let mut acc = 0.0;
        for b in (0..rates.m()).filter(|&b| b != x[i]) {
            acc += dt * rates.rate(i, b);
            if u < acc {
                *slot = b;
                break;
            }
        }
    }
    Ok(out)
}

/// Per position, leaves with probability `1 - exp(-dt * total)` and picks the
/// target in proportion to its rate; one uniform draw per position.
pub fn exponential_jump<R: Rng + ?Sized>(
    x: &[usize],
    rates: &NeighborRates,
    dt: f64,
    rng: &mut R,
) -> Vec<usize> {
    let mut out = x.to_vec();
    for (i, slot) in out.iter_mut().enumerate() {
        let total = rates.position_total(i);
        let leave = -(-dt * total).exp_m1();
        let u: f64 = rng.gen();
        if u >= leave {
            continue;
        }
        let mut acc = 0.0;
        for b in (0..rates.m()).filter(|&b| b != x[i] && rates.rate(i, b) > 0.0) {
            acc += leave * rates.rate(i, b) / total;
            // Rounding can leave `u` just above the accumulated mass; the last
            // reachable token absorbs it.
            *slot = b;
            if u < acc {
                break;
            }
        }
    }
    out
}

/// Tau-leap predictor step from `x` at forward time `t`.
pub fn tau_leap_step<S: ScoreModel + ?Sized, R: Rng + ?Sized>(
    x: &[usize],
    t: f64,
    dt: f64,
    score: &S,
    g: &TokenGenerator,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Vec<usize>> {
    tau_leap_step_with(StepRule::Euler, x, t, dt, score, g, sched, rng)
}

/// Predictor step under an explicit [`StepRule`].
#[allow(clippy::too_many_arguments)]
pub fn tau_leap_step_with<S: ScoreModel + ?Sized, R: Rng + ?Sized>(
    rule: StepRule,
    x: &[usize],
    t: f64,
    dt: f64,
    score: &S,
    g: &TokenGenerator,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if !(dt > 0.0) {
        return Err(Error::domain("dt must be positive"));
    }
    let rates = reverse_rates(g, sched, t, x, &score.eval_score(x, t)?)?;
    match rule {
        StepRule::Euler => euler_jump(x, &rates, dt, rng),
        StepRule::Exponential => Ok(exponential_jump(x, &rates, dt, rng)),
    }
}

/// One step under the time-homogeneous corrector generator `Q_t + Qbar_t`.
pub fn corrector_step<S: ScoreModel + ?Sized, R: Rng + ?Sized>(
    x: &[usize],
    t: f64,
    dt: f64,
    score: &S,
    g: &TokenGenerator,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if !(dt > 0.0) {
        return Err(Error::domain("dt must be positive"));
    }
    let rates = corrector_rates(g, sched, t, x, &score.eval_score(x, t)?)?;
    euler_jump(x, &rates, dt, rng)
}

/// Draws an initial sequence from `p_ref`.
pub fn sample_reference<R: Rng + ?Sized>(n: usize, g: &TokenGenerator, rng: &mut R) -> Vec<usize> {
    match g.reference_token() {
        Some(mask) => vec![mask; n],
        None => (0..n).map(|_| rng.gen_range(0..g.m())).collect(),
    }
}

fn clamp_prefix(x: &mut [usize], prefix: Option<&[usize]>) {
    if let Some(p) = prefix {
        x[..p.len()].copy_from_slice(p);
    }
}

/// Predictor run from `p_ref` to reverse time `T0`, with optional per-step
/// correctors. Prefix positions are clamped at every step.
pub fn sample_trajectory<S: ScoreModel + ?Sized, R: Rng + ?Sized>(
    cfg: &SamplerConfig,
    score: &S,
    g: &TokenGenerator,
    sched: &NoiseSchedule,
    prefix: Option<&[usize]>,
    rng: &mut R,
) -> Result<Trajectory> {
    cfg.validate(sched)?;
    let n = score.spec().len();
    if let Some(p) = prefix {
        if p.len() > n {
            return Err(Error::domain(format!(
                "prefix length {} exceeds n = {n}",
                p.len()
            )));
        }
        score
            .spec()
            .check(&[p, &vec![0; n - p.len()][..]].concat())?;
    }
    let dt = cfg.dt();
    let mut x = sample_reference(n, g, rng);
    clamp_prefix(&mut x, prefix);
    let mut states = Vec::with_capacity(cfg.n_steps + 1);
    let mut times = Vec::with_capacity(cfg.n_steps + 1);
    states.push(x.clone());
    times.push(0.0);
    for k in 0..cfg.n_steps {
        let t = cfg.horizon - k as f64 * dt;
        x = tau_leap_step_with(cfg.step_rule, &x, t, dt, score, g, sched, rng)?;
        clamp_prefix(&mut x, prefix);
        let t_next = (cfg.horizon - (k + 1) as f64 * dt).max(0.0);
        for _ in 0..cfg.n_corrector {
            x = corrector_step(&x, t_next, dt, score, g, sched, rng)?;
            clamp_prefix(&mut x, prefix);
        }
        states.push(x.clone());
        times.push(if k + 1 == cfg.n_steps {
            cfg.t0
        } else {
            (k + 1) as f64 * dt
        });
    }
    Ok(Trajectory { states, times })
}

/// Predictor to `T0`, then `corrector_after_t0` corrector steps at `T - T0`.
pub fn gradient_flow_sample<S: ScoreModel + ?Sized, R: Rng + ?Sized>(
    cfg: &SamplerConfig,
    score: &S,
    g: &TokenGenerator,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let traj = sample_trajectory(cfg, score, g, sched, None, rng)?;
    let mut x = traj.terminal().to_vec();
    for _ in 0..cfg.corrector_after_t0 {
        x = corrector_step(&x, cfg.stop_time(), cfg.dt(), score, g, sched, rng)?;
    }
    Ok(x)
}

/// `count` independent trajectories, trajectory `i` using stream `i` of `cfg.seed`.
pub fn sample_batch<S: ScoreModel + ?Sized>(
    cfg: &SamplerConfig,
    score: &S,
    g: &TokenGenerator,
    sched: &NoiseSchedule,
    prefix: Option<&[usize]>,
    count: usize,
) -> Result<Vec<Trajectory>> {
    (0..count)
        .map(|i| {
            let mut rng = trajectory_rng(cfg.seed, i as u64);
            sample_trajectory(cfg, score, g, sched, prefix, &mut rng)
        })
        .collect()
}

/// Terminal samples only; uses the gradient-flow sampler when `corrector_after_t0 > 0`.
pub fn sample_terminals<S: ScoreModel + ?Sized>(
    cfg: &SamplerConfig,
    score: &S,
    g: &TokenGenerator,
    sched: &NoiseSchedule,
    count: usize,
) -> Result<Vec<Vec<usize>>> {
    (0..count)
        .map(|i| {
            let mut rng = trajectory_rng(cfg.seed, i as u64);
            gradient_flow_sample(cfg, score, g, sched, &mut rng)
        })
        .collect()
}
