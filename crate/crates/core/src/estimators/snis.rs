//! Self-normalized importance sampling of reverse-process marginals.
//!
//! For a target `y` at forward time `t`, proposals `z_i` are drawn from the
//! forward noising kernel over an interval `delta` (the exact posterior of the
//! reverse process), and the estimate is the harmonic mean of the one-step
//! reverse conditionals `q(y | z_i)`. The conditional is the Bayes reverse
//! kernel built from the score at `z` evaluated at time `t`:
//!
//! * factorized: `prod_i K(z_i|y_i) s(z)_{i,y_i} / sum_a K(z_i|a) s(z)_{i,a}`,
//!   which only needs Hamming-1 ratios;
//! * joint: `K(z|y) s(z)_y / sum_{y'} K(z|y') s(z)_{y'}` over the full space,
//!   for scores defined on every pair (oracle scale).

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ctmc::{NoiseSchedule, SequenceSpec, TokenGenerator, TransitionKernel};
use crate::error::{Error, Result};
use crate::oracle::IndexCodec;
use crate::score::ScoreModel;

#[derive(Debug, Clone, PartialEq)]
pub struct SnisEstimate {
    pub value: f64,
    pub m: usize,
    pub conditionals: Vec<f64>,
}

/// Harmonic mean of the conditionals.
pub fn snis_marginal(conditionals: &[f64]) -> Result<SnisEstimate> {
    if conditionals.is_empty() {
        return Err(Error::domain("SNIS needs at least one conditional"));
    }
    if let Some(c) = conditionals.iter().find(|c| !(**c > 0.0)) {
        return Err(Error::domain(format!("nonpositive SNIS conditional {c}")));
    }
    let mean_inv = conditionals.iter().map(|c| 1.0 / c).sum::<f64>() / conditionals.len() as f64;
    Ok(SnisEstimate {
        value: 1.0 / mean_inv,
        m: conditionals.len(),
        conditionals: conditionals.to_vec(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SnisMode {
    Factorized,
    Joint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SnisSettings {
    pub mode: SnisMode,
    /// Number of proposals `M`.
    pub samples: usize,
    /// Noising interval `delta` of the proposal kernel.
    pub interval: f64,
    /// Redraws allowed for a proposal with zero conditional.
    #[serde(default = "default_retry_cap")]
    pub retry_cap: usize,
}

fn default_retry_cap() -> usize {
    64
}

impl Default for SnisSettings {
    fn default() -> Self {
        Self {
            mode: SnisMode::Factorized,
            samples: 4,
            interval: 1.0,
            retry_cap: default_retry_cap(),
        }
    }
}

/// Precomputed kernel and enumeration data for one evaluation time.
#[derive(Debug, Clone)]
pub struct SnisContext {
    spec: SequenceSpec,
    t: f64,
    kernel: TransitionKernel,
    settings: SnisSettings,
    codec: Option<IndexCodec>,
}

impl SnisContext {
    pub fn new(
        spec: SequenceSpec,
        g: &TokenGenerator,
        sched: &NoiseSchedule,
        t: f64,
        settings: SnisSettings,
        cap: usize,
    ) -> Result<Self> {
        if settings.samples == 0 {
            return Err(Error::config("SNIS sample count must be >= 1"));
        }
        if !(settings.interval > 0.0) {
            return Err(Error::config("SNIS interval must be positive"));
        }
        let upper = (t + settings.interval).min(sched.horizon());
        if !(upper > t) {
            return Err(Error::domain(format!(
                "no room for a proposal interval above t = {t}"
            )));
        }
        let kernel = crate::ctmc::transition_kernel(g, sched, t, upper)?;
        let codec = match settings.mode {
            SnisMode::Joint => Some(IndexCodec::new(spec, cap)?),
            SnisMode::Factorized => None,
        };
        Ok(Self {
            spec,
            t,
            kernel,
            settings,
            codec,
        })
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    pub fn settings(&self) -> &SnisSettings {
        &self.settings
    }

    pub fn kernel(&self) -> &TransitionKernel {
        &self.kernel
    }

    /// Draws `z ~ K(. | y)` independently per position.
    pub fn draw<R: Rng + ?Sized>(&self, y: &[usize], rng: &mut R) -> Vec<usize> {
        let m = self.spec.m();
        y.iter()
            .map(|&a| {
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                for b in 0..m {
                    acc += self.kernel.prob(b, a);
                    if u < acc {
                        return b;
                    }
                }
                // Round-off in the last bucket: fall back to the last reachable token.
                (0..m)
                    .rev()
                    .find(|&b| self.kernel.prob(b, a) > 0.0)
                    .unwrap_or(a)
            })
            .collect()
    }

    /// `q(y | z)` under `score`.
    pub fn conditional<S: ScoreModel + ?Sized>(
        &self,
        y: &[usize],
        z: &[usize],
        score: &S,
    ) -> Result<f64> {
        match self.settings.mode {
            SnisMode::Factorized => self.factorized(y, z, score),
            SnisMode::Joint => self.joint(y, z, score),
        }
    }

    fn factorized<S: ScoreModel + ?Sized>(
        &self,
        y: &[usize],
        z: &[usize],
        score: &S,
    ) -> Result<f64> {
        let table = score.eval_score(z, self.t)?;
        let m = self.spec.m();
        let mut log_q = 0.0;
        for (i, (&yi, &zi)) in y.iter().zip(z).enumerate() {
            let num = self.kernel.prob(zi, yi) * table.value(i, yi);
            if num == 0.0 {
                return Ok(0.0);
            }
            let den: f64 = (0..m)
                .map(|a| self.kernel.prob(zi, a) * table.value(i, a))
                .sum();
            log_q += (num / den).ln();
        }
        Ok(log_q.exp())
    }

    fn joint<S: ScoreModel + ?Sized>(&self, y: &[usize], z: &[usize], score: &S) -> Result<f64> {
        if !score.supports_full_space() {
            return Err(Error::Unsupported(
                "joint SNIS needs a full-space score".into(),
            ));
        }
        let codec = self.codec.as_ref().expect("joint mode has a codec");
        let kz = |src: &[usize]| -> f64 {
            src.iter()
                .zip(z)
                .map(|(&a, &b)| self.kernel.prob(b, a))
                .product()
        };
        let weight = |src: &[usize]| -> Result<f64> {
            let k = kz(src);
            if k == 0.0 {
                return Ok(0.0);
            }
            let s = if src == z {
                1.0
            } else {
                score.full_log_ratio(z, src, self.t)?.exp()
            };
            Ok(k * s)
        };
        let num = weight(y)?;
        if num == 0.0 {
            return Ok(0.0);
        }
        let mut den = 0.0;
        let mut buf = vec![0; self.spec.len()];
        for idx in 0..codec.num_states() {
            codec.decode_into(idx, &mut buf);
            den += weight(&buf)?;
        }
        Ok(num / den)
    }
}

/// Draws `M` proposals for `y` and returns them with their conditionals under `score`.
pub fn draw_snis_proposals<S: ScoreModel + ?Sized, R: Rng + ?Sized>(
    ctx: &SnisContext,
    y: &[usize],
    score: &S,
    rng: &mut R,
) -> Result<(Vec<Vec<usize>>, Vec<f64>)> {
    let mut zs = Vec::with_capacity(ctx.settings.samples);
    let mut cs = Vec::with_capacity(ctx.settings.samples);
    for _ in 0..ctx.settings.samples {
        let mut tries = 0;
        loop {
            let z = ctx.draw(y, rng);
            let c = ctx.conditional(y, &z, score)?;
            if c > 0.0 {
                zs.push(z);
                cs.push(c);
                break;
            }
            tries += 1;
            if tries > ctx.settings.retry_cap {
                return Err(Error::domain(format!(
                    "SNIS proposal for {y:?} has zero conditional after {tries} draws"
                )));
            }
        }
    }
    Ok((zs, cs))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SnisEntry {
    pub proposals: Vec<Vec<usize>>,
    pub old: SnisEstimate,
    pub new: Option<SnisEstimate>,
}

/// Marginal estimates keyed by target sequence. Proposals are shared between
/// the frozen and the current parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SnisCache {
    entries: BTreeMap<Vec<usize>, SnisEntry>,
}

impl SnisCache {
    /// Draws proposals for every target (in sorted order) and evaluates them under `old`.
    pub fn build<'a, S, R, I>(ctx: &SnisContext, targets: I, old: &S, rng: &mut R) -> Result<Self>
    where
        S: ScoreModel + ?Sized,
        R: Rng + ?Sized,
        I: IntoIterator<Item = &'a Vec<usize>>,
    {
        let mut keys: Vec<&Vec<usize>> = targets.into_iter().collect();
        keys.sort();
        keys.dedup();
        let mut entries = BTreeMap::new();
        for y in keys {
            let (proposals, cs) = draw_snis_proposals(ctx, y, old, rng)?;
            let old = snis_marginal(&cs)?;
            entries.insert(
                y.clone(),
                SnisEntry {
                    proposals,
                    old,
                    new: None,
                },
            );
        }
        Ok(Self { entries })
    }

    /// Re-evaluates the stored proposals under the current parameters.
    pub fn refresh_new<S: ScoreModel + ?Sized>(
        &mut self,
        ctx: &SnisContext,
        new: &S,
    ) -> Result<()> {
        for (y, entry) in self.entries.iter_mut() {
            let cs = entry
                .proposals
                .iter()
                .map(|z| ctx.conditional(y, z, new))
                .collect::<Result<Vec<_>>>()?;
            entry.new = Some(snis_marginal(&cs)?);
        }
        Ok(())
    }

    pub fn get(&self, y: &[usize]) -> Result<&SnisEntry> {
        self.entries
            .get(y)
            .ok_or_else(|| Error::InternalState(format!("no SNIS estimate cached for {y:?}")))
    }

    pub fn old_value(&self, y: &[usize]) -> Result<f64> {
        Ok(self.get(y)?.old.value)
    }

    pub fn new_value(&self, y: &[usize]) -> Result<f64> {
        self.get(y)?
            .new
            .as_ref()
            .map(|e| e.value)
            .ok_or_else(|| Error::InternalState(format!("SNIS estimate for {y:?} not refreshed")))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctmc::{build_generator, GeneratorKind, Vocab};
    use crate::oracle::{closed_form_forward_marginals, SimplexDist};
    use crate::sampler::trajectory_rng;
    use crate::score::teacher_score;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn harmonic_mean_examples() {
        assert_abs_diff_eq!(
            snis_marginal(&[0.5, 0.25]).unwrap().value,
            1.0 / 3.0,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            snis_marginal(&[0.3; 7]).unwrap().value,
            0.3,
            epsilon = 1e-15
        );
        assert_eq!(snis_marginal(&[0.42]).unwrap().value, 0.42);
        assert!(matches!(snis_marginal(&[0.5, 0.0]), Err(Error::Domain(_))));
        assert!(snis_marginal(&[]).is_err());
    }

    proptest! {
        #[test]
        fn harmonic_mean_identity(cs in prop::collection::vec(1e-6f64..1.0, 1..40)) {
            let est = snis_marginal(&cs).unwrap();
            let direct = cs.len() as f64 / cs.iter().map(|c| 1.0 / c).sum::<f64>();
            prop_assert!((est.value - direct).abs() <= 1e-12 * direct);
            let lo = cs.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = cs.iter().copied().fold(0.0, f64::max);
            prop_assert!(est.value >= lo * (1.0 - 1e-12) && est.value <= hi * (1.0 + 1e-12));
        }
    }

    fn toy() -> (SequenceSpec, TokenGenerator, NoiseSchedule, SimplexDist) {
        let sp = SequenceSpec::new(1, Vocab::new(2, None).unwrap()).unwrap();
        let g = build_generator(GeneratorKind::Uniform, sp.vocab()).unwrap();
        let sched = NoiseSchedule::default();
        let p0 = SimplexDist::new(sp, vec![0.8, 0.2]).unwrap();
        (sp, g, sched, p0)
    }

    #[test]
    fn tiny_interval_gives_self_transition() {
        let (sp, g, sched, p0) = toy();
        let teacher = teacher_score(&g, &sched, &p0).unwrap();
        let settings = SnisSettings {
            samples: 16,
            interval: 1e-12,
            ..Default::default()
        };
        let ctx = SnisContext::new(sp, &g, &sched, 0.3, settings, 4096).unwrap();
        let mut rng = trajectory_rng(1, 0);
        let (zs, cs) = draw_snis_proposals(&ctx, &[1], &teacher, &mut rng).unwrap();
        assert!(zs.iter().all(|z| z == &vec![1]));
        for c in cs {
            assert_abs_diff_eq!(c, 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn teacher_estimate_is_close_to_exact_marginal() {
        let (sp, g, sched, p0) = toy();
        let teacher = teacher_score(&g, &sched, &p0).unwrap();
        let t = 0.3;
        let exact = closed_form_forward_marginals(&p0, &g, &sched, t).unwrap();
        for mode in [SnisMode::Factorized, SnisMode::Joint] {
            let settings = SnisSettings {
                mode,
                samples: 64,
                interval: 0.7,
                ..Default::default()
            };
            let ctx = SnisContext::new(sp, &g, &sched, t, settings, 4096).unwrap();
            let mut rng = trajectory_rng(2, 0);
            let reps = 300;
            let mean = (0..reps)
                .map(|_| {
                    let (_, cs) = draw_snis_proposals(&ctx, &[1], &teacher, &mut rng).unwrap();
                    snis_marginal(&cs).unwrap().value
                })
                .sum::<f64>()
                / reps as f64;
            let rel = (mean - exact.probs()[1]).abs() / exact.probs()[1];
            assert!(rel < 0.02, "{mode:?}: relative error {rel}");
        }
    }

    #[test]
    fn cache_reports_missing_and_unrefreshed_entries() {
        let (sp, g, sched, p0) = toy();
        let teacher = teacher_score(&g, &sched, &p0).unwrap();
        let ctx = SnisContext::new(sp, &g, &sched, 0.2, SnisSettings::default(), 4096).unwrap();
        let mut rng = trajectory_rng(0, 0);
        let targets = vec![vec![1], vec![1], vec![0]];
        let mut cache = SnisCache::build(&ctx, &targets, &teacher, &mut rng).unwrap();
        assert_eq!(cache.len(), 2);
        assert!(matches!(
            cache.new_value(&[1]),
            Err(Error::InternalState(_))
        ));
        cache.refresh_new(&ctx, &teacher).unwrap();
        assert_eq!(
            cache.new_value(&[1]).unwrap(),
            cache.old_value(&[1]).unwrap()
        );
        let other = SnisCache::default();
        assert!(matches!(other.get(&[0]), Err(Error::InternalState(_))));
    }
}
