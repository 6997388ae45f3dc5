//! Token-level CTMC building blocks.
//!
//! Convention used everywhere in this crate: generators act on column
//! distributions, `dp/dt = Q p`. Entry `[target, source]` is the rate of
//! jumping from `source` to `target`, so every column sums to zero.
//!
//! Sequence-level rates are token-factorized: each position is noised
//! independently with `sigma(t) * base`, so a sequence only ever jumps to a
//! Hamming-1 neighbor. The full `d x d` generator is assembled only by the
//! oracle module.
//!
//! Times passed to functions in this module are forward (noising) times in
//! `[0, T]`. Samplers run in reverse time `tau` and evaluate rates at `T - tau`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::score::NeighborTable;

/// Default cap on the number of enumerated states for oracle computations.
pub const DEFAULT_ORACLE_CAP: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Vocab {
    m: usize,
    mask_index: Option<usize>,
}

impl Vocab {
    pub fn new(m: usize, mask_index: Option<usize>) -> Result<Self> {
        if m < 2 {
            return Err(Error::config(format!(
                "vocabulary size must be >= 2, got {m}"
            )));
        }
        if let Some(mask) = mask_index {
            if mask >= m {
                return Err(Error::config(format!(
                    "mask index {mask} out of range for m = {m}"
                )));
            }
        }
        Ok(Self { m, mask_index })
    }

    pub fn size(&self) -> usize {
        self.m
    }

    pub fn mask_index(&self) -> Option<usize> {
        self.mask_index
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SequenceSpec {
    n: usize,
    vocab: Vocab,
}

impl SequenceSpec {
    pub fn new(n: usize, vocab: Vocab) -> Result<Self> {
        if n == 0 {
            return Err(Error::config("sequence length must be >= 1"));
        }
        let spec = Self { n, vocab };
        if spec.checked_states().is_none() {
            return Err(Error::config(format!(
                "state space {}^{} is not representable",
                vocab.size(),
                n
            )));
        }
        Ok(spec)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn vocab(&self) -> Vocab {
        self.vocab
    }

    pub fn m(&self) -> usize {
        self.vocab.size()
    }

    fn checked_states(&self) -> Option<u128> {
        (self.vocab.size() as u128).checked_pow(self.n as u32)
    }

    /// `d = m^n`.
    pub fn num_states(&self) -> u128 {
        self.checked_states().expect("validated at construction")
    }

    /// `d` as a `usize`, failing when it exceeds `cap`.
    pub fn oracle_states(&self, cap: usize) -> Result<usize> {
        let d = self.num_states();
        if d > cap as u128 {
            return Err(Error::Capacity { states: d, cap });
        }
        Ok(d as usize)
    }

    /// Validates that `x` is a sequence of this spec.
    pub fn check(&self, x: &[usize]) -> Result<()> {
        if x.len() != self.n {
            return Err(Error::domain(format!(
                "sequence length {} does not match n = {}",
                x.len(),
                self.n
            )));
        }
        if let Some(&bad) = x.iter().find(|&&a| a >= self.m()) {
            return Err(Error::domain(format!(
                "token {bad} out of range for m = {}",
                self.m()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    Geometric,
}

/// Scalar noise rate `sigma(t)` on `[0, T]` with closed-form cumulative noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    sigma_min: f64,
    sigma_max: f64,
    horizon: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Linear,
            sigma_min: 1e-3,
            sigma_max: 5.0,
            horizon: 1.0,
        }
    }
}

impl NoiseSchedule {
    pub fn new(kind: ScheduleKind, sigma_min: f64, sigma_max: f64, horizon: f64) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::config(format!(
                "horizon must be positive, got {horizon}"
            )));
        }
        if !(sigma_min >= 0.0 && sigma_max >= 0.0 && sigma_min.is_finite() && sigma_max.is_finite())
        {
            return Err(Error::config("noise rates must be finite and nonnegative"));
        }
        if kind == ScheduleKind::Geometric && !(sigma_min > 0.0 && sigma_max > sigma_min) {
            return Err(Error::config(
                "geometric schedule needs 0 < sigma_min < sigma_max",
            ));
        }
        Ok(Self {
            kind,
            sigma_min,
            sigma_max,
            horizon,
        })
    }

    /// Constant rate `sigma`, so `cumulative(t) = sigma * t`.
    pub fn constant(sigma: f64, horizon: f64) -> Result<Self> {
        Self::new(ScheduleKind::Linear, sigma, sigma, horizon)
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn sigma_min(&self) -> f64 {
        self.sigma_min
    }

    pub fn sigma_max(&self) -> f64 {
        self.sigma_max
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn rate(&self, t: f64) -> f64 {
        let frac = t / self.horizon;
        match self.kind {
            ScheduleKind::Linear => self.sigma_min + (self.sigma_max - self.sigma_min) * frac,
            ScheduleKind::Geometric => {
                let total = self.sigma_min.powf(1.0 - frac) * self.sigma_max.powf(frac);
                total * (self.sigma_max / self.sigma_min).ln() / self.horizon
            }
        }
    }

    /// `int_0^t sigma(s) ds`.
    pub fn cumulative(&self, t: f64) -> f64 {
        let frac = t / self.horizon;
        match self.kind {
            ScheduleKind::Linear => {
                self.sigma_min * t + 0.5 * (self.sigma_max - self.sigma_min) * frac * t
            }
            ScheduleKind::Geometric => {
                self.sigma_min.powf(1.0 - frac) * self.sigma_max.powf(frac) - self.sigma_min
            }
        }
    }

    pub(crate) fn check_time(&self, t: f64) -> Result<()> {
        let tol = 1e-12 * self.horizon.max(1.0);
        if !(t >= -tol && t <= self.horizon + tol) {
            return Err(Error::domain(format!(
                "time {t} outside [0, {}]",
                self.horizon
            )));
        }
        Ok(())
    }

    /// Short stable identifier used in checkpoint headers and manifests.
    pub fn fingerprint(&self) -> String {
        crate::hash_hex(&format!(
            "{:?}|{:e}|{:e}|{:e}",
            self.kind, self.sigma_min, self.sigma_max, self.horizon
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    Uniform,
    Absorbing,
}

/// Per-token `m x m` rate generator, `base[target, source]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGenerator {
    kind: GeneratorKind,
    base: Vec<f64>,
    vocab: Vocab,
}

impl TokenGenerator {
    pub fn kind(&self) -> GeneratorKind {
        self.kind
    }

    pub fn vocab(&self) -> Vocab {
        self.vocab
    }

    pub fn m(&self) -> usize {
        self.vocab.size()
    }

    /// Base rate of jumping `source -> target`.
    #[inline]
    pub fn base(&self, target: usize, source: usize) -> f64 {
        self.base[target * self.vocab.size() + source]
    }

    /// Row-major copy of the base matrix.
    pub fn base_matrix(&self) -> &[f64] {
        &self.base
    }

    /// Noise-free starting distribution of the reverse process at the token level.
    pub fn reference_token(&self) -> Option<usize> {
        match self.kind {
            GeneratorKind::Uniform => None,
            GeneratorKind::Absorbing => self.vocab.mask_index(),
        }
    }
}

pub fn build_generator(kind: GeneratorKind, vocab: Vocab) -> Result<TokenGenerator> {
    let m = vocab.size();
    let mut base = vec![0.0; m * m];
    match kind {
        GeneratorKind::Uniform => {
            let off = 1.0 / m as f64;
            for target in 0..m {
                for source in 0..m {
                    base[target * m + source] = if target == source {
                        -((m - 1) as f64) * off
                    } else {
                        off
                    };
                }
            }
        }
        GeneratorKind::Absorbing => {
            let mask = vocab
                .mask_index()
                .ok_or_else(|| Error::config("absorbing generator requires a mask index"))?;
            for source in (0..m).filter(|&s| s != mask) {
                base[mask * m + source] = 1.0;
                base[source * m + source] = -1.0;
            }
        }
    }
    Ok(TokenGenerator { kind, base, vocab })
}

/// Column-stochastic `m x m` matrix, `entry(target, source)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionKernel {
    m: usize,
    probs: Vec<f64>,
}

impl TransitionKernel {
    #[inline]
    pub fn prob(&self, target: usize, source: usize) -> f64 {
        self.probs[target * self.m + source]
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.probs
    }

    /// Kernel for an explicit amount of accumulated noise `sigma_bar`.
    pub fn from_noise(g: &TokenGenerator, sigma_bar: f64) -> Self {
        let m = g.m();
        let survive = (-sigma_bar).exp();
        let mut probs = vec![0.0; m * m];
        match g.kind() {
            GeneratorKind::Uniform => {
                let spread = (1.0 - survive) / m as f64;
                for target in 0..m {
                    for source in 0..m {
                        probs[target * m + source] =
                            spread + if target == source { survive } else { 0.0 };
                    }
                }
            }
            GeneratorKind::Absorbing => {
                let mask = g
                    .vocab()
                    .mask_index()
                    .expect("absorbing generator has a mask");
                for source in 0..m {
                    if source == mask {
                        probs[mask * m + mask] = 1.0;
                    } else {
                        probs[source * m + source] = survive;
                        probs[mask * m + source] = 1.0 - survive;
                    }
                }
            }
        }
        Self { m, probs }
    }
}

/// Closed-form `exp((cum(t) - cum(s)) * base)`.
pub fn transition_kernel(
    g: &TokenGenerator,
    sched: &NoiseSchedule,
    s: f64,
    t: f64,
) -> Result<TransitionKernel> {
    if s > t {
        return Err(Error::Ordering { s, t });
    }
    sched.check_time(s)?;
    sched.check_time(t)?;
    let sigma_bar = sched.cumulative(t) - sched.cumulative(s);
    Ok(TransitionKernel::from_noise(g, sigma_bar.max(0.0)))
}

/// Rates of jumping from an anchor sequence to each of its Hamming-1 neighbors.
///
/// `rate(i, a)` is the rate of replacing token `x_i` by `a`; the entry at
/// `a == x_i` is zero and the diagonal of the full generator is `-total()`.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborRates {
    n: usize,
    m: usize,
    rates: Vec<f64>,
}

impl NeighborRates {
    pub(crate) fn zeros(n: usize, m: usize) -> Self {
        Self {
            n,
            m,
            rates: vec![0.0; n * m],
        }
    }

    #[inline]
    pub fn rate(&self, pos: usize, token: usize) -> f64 {
        self.rates[pos * self.m + token]
    }

    #[inline]
    pub(crate) fn rate_mut(&mut self, pos: usize, token: usize) -> &mut f64 {
        &mut self.rates[pos * self.m + token]
    }

    /// Total rate out of position `pos`.
    pub fn position_total(&self, pos: usize) -> f64 {
        self.rates[pos * self.m..(pos + 1) * self.m].iter().sum()
    }

    pub fn total(&self) -> f64 {
        self.rates.iter().sum()
    }

    /// Diagonal entry of the sequence-level generator at the anchor.
    pub fn diagonal(&self) -> f64 {
        -self.total()
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub(crate) fn add(&mut self, other: &NeighborRates) {
        for (a, b) in self.rates.iter_mut().zip(&other.rates) {
            *a += b;
        }
    }
}

/// Forward rates out of `x` at forward time `t`: `sigma(t) * base[a, x_i]`.
pub fn forward_rates(
    g: &TokenGenerator,
    sched: &NoiseSchedule,
    t: f64,
    x: &[usize],
) -> Result<NeighborRates> {
    sched.check_time(t)?;
    let m = g.m();
    let sigma = sched.rate(t);
    let mut out = NeighborRates::zeros(x.len(), m);
    for (i, &xi) in x.iter().enumerate() {
        for a in (0..m).filter(|&a| a != xi) {
            *out.rate_mut(i, a) = sigma * g.base(a, xi);
        }
    }
    Ok(out)
}

/// Reverse rates out of `x`: `ratios[y] * sigma(t) * base[x_i, y_i]`.
///
/// The reverse jump `x -> y` uses the forward rate of the opposite jump
/// `y -> x`, so zero forward rates (e.g. re-masking in the absorbing kind)
/// give zero reverse rates regardless of the ratio.
pub fn reverse_rates(
    g: &TokenGenerator,
    sched: &NoiseSchedule,
    t: f64,
    x: &[usize],
    ratios: &NeighborTable,
) -> Result<NeighborRates> {
    sched.check_time(t)?;
    let m = g.m();
    if ratios.n() != x.len() || ratios.m() != m {
        return Err(Error::domain(
            "neighbor table shape does not match the sequence",
        ));
    }
    let sigma = sched.rate(t);
    let mut out = NeighborRates::zeros(x.len(), m);
    for (i, &xi) in x.iter().enumerate() {
        for a in (0..m).filter(|&a| a != xi) {
            let fwd = g.base(xi, a);
            if fwd == 0.0 {
                continue;
            }
            let r = ratios.value(i, a);
            if r < 0.0 || r.is_nan() {
                return Err(Error::domain(format!(
                    "negative score ratio {r} at ({i}, {a})"
                )));
            }
            *out.rate_mut(i, a) = r * sigma * fwd;
        }
    }
    Ok(out)
}

/// Rates of the corrector generator `Q_t + Qbar_t` out of `x`.
pub fn corrector_rates(
    g: &TokenGenerator,
    sched: &NoiseSchedule,
    t: f64,
    x: &[usize],
    ratios: &NeighborTable,
) -> Result<NeighborRates> {
    let mut rates = forward_rates(g, sched, t, x)?;
    rates.add(&reverse_rates(g, sched, t, x, ratios)?);
    Ok(rates)
}
