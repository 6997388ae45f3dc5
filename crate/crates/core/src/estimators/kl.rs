//! Path-space KL regularizer and first variations of simplex functionals.

use crate::ctmc::{reverse_rates, NoiseSchedule, TokenGenerator};
use crate::error::{Error, Result};
use crate::oracle::SimplexDist;
use crate::sampler::Trajectory;
use crate::score::ScoreModel;

use super::rewards::Reward;

/// Generalized I-divergence between jump rates, `a - b + b ln(b / a)`.
///
/// `a` is the reference (pretrained) rate and `b` the current one. The term is
/// `+inf` when `a = 0 < b`.
pub fn rate_divergence(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        a
    } else if a == 0.0 {
        f64::INFINITY
    } else {
        a - b + b * (b / a).ln()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathKl {
    pub value: f64,
    /// Gradient with respect to the parameters of the current score.
    pub grad: Vec<f64>,
    /// A current rate was positive where the reference rate vanished.
    pub infinite: bool,
}

/// Discretized path KL along sampled trajectories:
/// `mean_traj sum_steps dt sum_y [a - b + b ln(b/a)]` with `a` the reference
/// reverse rate and `b` the current one, evaluated at each step's start.
pub fn path_kl<S, P>(
    score: &S,
    score_pre: &P,
    trajectories: &[Trajectory],
    g: &TokenGenerator,
    sched: &NoiseSchedule,
) -> Result<PathKl>
where
    S: ScoreModel + ?Sized,
    P: ScoreModel + ?Sized,
{
    if score.spec() != score_pre.spec() {
        return Err(Error::domain(
            "path KL needs scores on the same sequence space",
        ));
    }
    let horizon = sched.horizon();
    let mut grad = vec![0.0; score.num_params()];
    let mut value = 0.0;
    let mut infinite = false;
    for traj in trajectories {
        for k in 0..traj.states.len().saturating_sub(1) {
            let x = &traj.states[k];
            let dt = traj.times[k + 1] - traj.times[k];
            let t = (horizon - traj.times[k]).clamp(0.0, horizon);
            let cur = reverse_rates(g, sched, t, x, &score.eval_score(x, t)?)?;
            let pre = reverse_rates(g, sched, t, x, &score_pre.eval_score(x, t)?)?;
            for (i, &xi) in x.iter().enumerate() {
                for c in (0..g.m()).filter(|&c| c != xi) {
                    let (a, b) = (pre.rate(i, c), cur.rate(i, c));
                    let term = rate_divergence(a, b);
                    if term.is_infinite() {
                        infinite = true;
                        continue;
                    }
                    value += dt * term;
                    if b > 0.0 {
                        score.add_grad_log_score(x, t, i, c, dt * b * (b / a).ln(), &mut grad)?;
                    }
                }
            }
        }
    }
    let n = trajectories.len().max(1) as f64;
    grad.iter_mut().for_each(|v| *v /= n);
    Ok(PathKl {
        value: if infinite { f64::INFINITY } else { value / n },
        grad,
        infinite,
    })
}

pub enum Functional<'a> {
    ExpectedReward(&'a Reward),
    /// `KL(p || q)` against the given reference `q`.
    KlVsRef(&'a SimplexDist),
}

/// First variation `f` of a functional at `p`, so that `d F = f^T d p`.
///
/// For the KL case, `f(x) = ln(p(x)/q(x)) + 1` on the support of `p`; states
/// with `p(x) = 0` get `-inf`.
pub fn first_variation(functional: &Functional<'_>, p: &SimplexDist) -> Result<Vec<f64>> {
    let codec = p.codec();
    match functional {
        Functional::ExpectedReward(r) => Ok((0..codec.num_states())
            .map(|i| r.eval(&codec.decode(i)))
            .collect()),
        Functional::KlVsRef(q) => {
            if q.spec() != p.spec() {
                return Err(Error::domain(
                    "first variation needs distributions on the same space",
                ));
            }
            p.probs()
                .iter()
                .zip(q.probs())
                .map(|(&a, &b)| {
                    if a == 0.0 {
                        Ok(f64::NEG_INFINITY)
                    } else if b == 0.0 {
                        Err(Error::domain("reference has no mass where p does"))
                    } else {
                        Ok((a / b).ln() + 1.0)
                    }
                })
                .collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctmc::{build_generator, GeneratorKind, SequenceSpec, Vocab};
    use crate::score::ScoreParams;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn divergence_is_nonnegative(a in 1e-8f64..50.0, b in 0.0f64..50.0) {
            prop_assert!(rate_divergence(a, b) >= -1e-12 * a.max(b));
        }
    }

    #[test]
    fn divergence_edge_cases() {
        assert_eq!(rate_divergence(2.0, 2.0), 0.0);
        assert_eq!(rate_divergence(0.0, 0.0), 0.0);
        assert_eq!(rate_divergence(1.5, 0.0), 1.5);
        assert!(rate_divergence(0.0, 1.0).is_infinite());
    }

    fn setup() -> (SequenceSpec, TokenGenerator, NoiseSchedule) {
        let sp = SequenceSpec::new(1, Vocab::new(2, None).unwrap()).unwrap();
        let g = build_generator(GeneratorKind::Uniform, sp.vocab()).unwrap();
        (sp, g, NoiseSchedule::constant(2.0, 1.0).unwrap())
    }

    #[test]
    fn identical_scores_give_zero() {
        let (sp, g, sched) = setup();
        let mut s = ScoreParams::new(sp, GeneratorKind::Uniform, 1.0, 2, false).unwrap();
        s.set_entry(0, 0, 0, 1, 0.7).unwrap();
        let traj = Trajectory {
            states: vec![vec![0], vec![0], vec![1]],
            times: vec![0.0, 0.5, 1.0],
        };
        let kl = path_kl(&s, &s, &[traj], &g, &sched).unwrap();
        assert_eq!(kl.value, 0.0);
        assert!(kl.grad.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn hand_expanded_two_steps() {
        let (sp, g, sched) = setup();
        // Buckets: [0, 0.5) and [0.5, 1]; reverse times 0 and 0.5 map to t = 1 and 0.5.
        let mut cur = ScoreParams::new(sp, GeneratorKind::Uniform, 1.0, 2, false).unwrap();
        let mut pre = cur.clone();
        cur.set_entry(1, 0, 0, 1, 2f64.ln()).unwrap(); // s = 2 at t = 1 from token 0
        cur.set_entry(1, 0, 1, 0, 0.5f64.ln()).unwrap(); // s = 0.5 at t = 0.5 from token 1
        pre.set_entry(1, 0, 1, 0, 3f64.ln()).unwrap(); // s_pre = 3 at t = 0.5 from token 1
        let traj = Trajectory {
            states: vec![vec![0], vec![1], vec![1]],
            times: vec![0.0, 0.5, 1.0],
        };
        let kl = path_kl(&cur, &pre, &[traj], &g, &sched).unwrap();
        // sigma = 2, base off-diagonal 1/2: rates are sigma * 0.5 * s = s.
        let step1 = 0.5 * (1.0 - 2.0 + 2.0 * (2.0f64).ln());
        let step2 = 0.5 * (3.0 - 0.5 + 0.5 * (0.5f64 / 3.0).ln());
        assert_abs_diff_eq!(kl.value, step1 + step2, epsilon = 1e-12);
        let i1 = cur.index(1, 0, 0, 1);
        let i2 = cur.index(1, 0, 1, 0);
        assert_abs_diff_eq!(kl.grad[i1], 0.5 * 2.0 * 2f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(
            kl.grad[i2],
            0.5 * 0.5 * (0.5f64 / 3.0).ln(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn first_variation_cases() {
        let sp = SequenceSpec::new(2, Vocab::new(2, None).unwrap()).unwrap();
        let p = SimplexDist::new(sp, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let r = Reward::MotifCount { pattern: vec![1] };
        assert_eq!(
            first_variation(&Functional::ExpectedReward(&r), &p).unwrap(),
            vec![0.0, 1.0, 1.0, 2.0]
        );
        let f = first_variation(&Functional::KlVsRef(&p), &p).unwrap();
        assert!(f.iter().all(|v| (*v - 1.0).abs() < 1e-15));
        let point = SimplexDist::new(sp, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(first_variation(&Functional::KlVsRef(&point), &p).is_err());
    }
}
