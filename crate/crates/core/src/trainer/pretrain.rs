//! Denoising score-entropy pretraining of a tabular score on a toy dataset.
//!
//! For a data point `x0`, a time `t` and a noised `x_t ~ K_t(. | x0)`, each
//! neighbor `y` of `x_t` contributes `w (s_y - r log s_y + r (log r - 1))` with
//! `r = K_t(y_i | x0_i) / K_t(x_t,i | x0_i)` and `w = sigma(t) base(x_t,i, y_i)`,
//! the weight of the reverse rate. The sampled times are fixed up front, so the
//! objective is deterministic and is minimized by full-batch Adam.
//!
//! A tabular score at position `i` only sees `x_t,i`, so the expectation over
//! the noised token is taken exactly, position by position; only the times are
//! sampled. The objective then separates per entry into `a e^theta - b theta + c`.
//! Entries with `a > 0 = b` (a target the noising can never produce) have their
//! infimum at `-inf` and are set there after the last step.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{Optimizer, OptimizerKind};
use crate::ctmc::{transition_kernel, NoiseSchedule, TokenGenerator};
use crate::error::{Error, Result};
use crate::score::{ScoreModel, ScoreParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    /// Sampled times per data point, stratified over `(0, T]`.
    pub noise_samples: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 0.05,
            noise_samples: 16,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Pretrained {
    pub params: ScoreParams,
    /// Objective value before each step, plus the final value.
    pub losses: Vec<f64>,
}

struct Objective {
    a: Vec<f64>,
    b: Vec<f64>,
    c: f64,
    count: f64,
}

impl Objective {
    fn value(&self, theta: &[f64]) -> f64 {
        let mut v = self.c;
        for ((a, b), th) in self.a.iter().zip(&self.b).zip(theta) {
            if *a > 0.0 {
                v += a * th.exp() - b * th;
            }
        }
        v / self.count
    }

    fn grad(&self, theta: &[f64]) -> Vec<f64> {
        (0..theta.len())
            .map(|i| {
                if self.a[i] > 0.0 {
                    (self.a[i] * theta[i].exp() - self.b[i]) / self.count
                } else {
                    0.0
                }
            })
            .collect()
    }
}

fn build_objective(
    dataset: &[Vec<usize>],
    params: &ScoreParams,
    g: &TokenGenerator,
    sched: &NoiseSchedule,
    cfg: &PretrainConfig,
) -> Result<Objective> {
    let m = g.m();
    let horizon = sched.horizon();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut a = vec![0.0; params.num_params()];
    let mut b = vec![0.0; params.num_params()];
    let mut c = 0.0;
    for x0 in dataset {
        params.spec().check(x0)?;
        for j in 0..cfg.noise_samples {
            let t = horizon * (j as f64 + rng.gen_range(1e-6..1.0)) / cfg.noise_samples as f64;
            let k = transition_kernel(g, sched, 0.0, t)?;
            let sigma = sched.rate(t);
            let bucket = params.bucket(t)?;
            for (i, &src) in x0.iter().enumerate() {
                for cur in (0..m).filter(|&c| k.prob(c, src) > 0.0) {
                    let p_cur = k.prob(cur, src);
                    for prop in (0..m).filter(|&p| p != cur && params.is_free(cur, p)) {
                        let w = sigma * g.base(cur, prop);
                        if !(w > 0.0) {
                            continue;
                        }
                        let r = k.prob(prop, src) / p_cur;
                        let idx = params.index(bucket, i, cur, prop);
                        a[idx] += p_cur * w;
                        b[idx] += p_cur * w * r;
                        if r > 0.0 {
                            c += p_cur * w * r * (r.ln() - 1.0);
                        }
                    }
                }
            }
        }
    }
    Ok(Objective {
        a,
        b,
        c,
        count: (dataset.len() * cfg.noise_samples) as f64,
    })
}

/// Fits `init` to `dataset` by minimizing the denoising score entropy.
pub fn pretrain_score(
    dataset: &[Vec<usize>],
    init: ScoreParams,
    g: &TokenGenerator,
    sched: &NoiseSchedule,
    cfg: &PretrainConfig,
) -> Result<Pretrained> {
    if dataset.is_empty() {
        return Err(Error::config("pretraining dataset is empty"));
    }
    if cfg.noise_samples == 0 {
        return Err(Error::config("noise_samples must be >= 1"));
    }
    if (init.horizon() - sched.horizon()).abs() > 1e-12 * sched.horizon().max(1.0) {
        return Err(Error::config("score horizon differs from schedule horizon"));
    }
    let objective = build_objective(dataset, &init, g, sched, cfg)?;
    let mut params = init;
    let mut theta = params.params().to_vec();
    let mut opt = Optimizer::new(OptimizerKind::Adam, cfg.lr, theta.len())?;
    let mut losses = Vec::with_capacity(cfg.steps + 1);
    for _ in 0..cfg.steps {
        losses.push(objective.value(&theta));
        let grad = objective.grad(&theta);
        opt.step(&mut theta, &grad, 1.0)?;
    }
    losses.push(objective.value(&theta));
    if cfg.steps > 0 {
        for ((th, a), b) in theta.iter_mut().zip(&objective.a).zip(&objective.b) {
            if *a > 0.0 && *b == 0.0 {
                *th = f64::NEG_INFINITY;
            }
        }
        params.set_params(&theta)?;
    }
    Ok(Pretrained { params, losses })
}

/// One sequence per line, whitespace-separated tokens; `#` lines are comments.
pub fn parse_sequences(text: &str) -> Result<Vec<Vec<usize>>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let seq = line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<usize>().map_err(|e| {
                    Error::Parse(format!("line {}: bad token {tok:?}: {e}", lineno + 1))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(seq);
    }
    Ok(out)
}

pub fn format_sequences(seqs: &[Vec<usize>]) -> String {
    let mut s = String::new();
    for seq in seqs {
        let line: Vec<String> = seq.iter().map(|t| t.to_string()).collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    s
}
