//! Exhaustive-enumeration ground truth on small state spaces.
//!
//! Everything here enumerates all `d = m^n` sequences and is guarded by an
//! oracle capacity. Full generators act on dense column distributions.

use crate::ctmc::{
    reverse_rates, GeneratorKind, NeighborRates, NoiseSchedule, SequenceSpec, TokenGenerator,
    TransitionKernel,
};
use crate::error::{Error, Result};
use crate::score::{NeighborTable, ScoreModel};

/// Lexicographic bijection between sequences and `[0, d)`; position 0 is the
/// most significant digit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IndexCodec {
    spec: SequenceSpec,
    d: usize,
}

impl IndexCodec {
    pub fn new(spec: SequenceSpec, cap: usize) -> Result<Self> {
        let d = spec.oracle_states(cap)?;
        Ok(Self { spec, d })
    }

    pub fn spec(&self) -> &SequenceSpec {
        &self.spec
    }

    pub fn num_states(&self) -> usize {
        self.d
    }

    /// Index offset of changing position `pos` by one unit.
    pub fn stride(&self, pos: usize) -> usize {
        self.spec.m().pow((self.spec.len() - 1 - pos) as u32)
    }

    pub fn encode(&self, x: &[usize]) -> usize {
        let m = self.spec.m();
        x.iter().fold(0, |acc, &a| acc * m + a)
    }

    pub fn decode(&self, idx: usize) -> Vec<usize> {
        let mut out = vec![0; self.spec.len()];
        self.decode_into(idx, &mut out);
        out
    }

    pub fn decode_into(&self, mut idx: usize, out: &mut [usize]) {
        let m = self.spec.m();
        for slot in out.iter_mut().rev() {
            *slot = idx % m;
            idx /= m;
        }
    }
}

/// Dense probability vector over all sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct SimplexDist {
    spec: SequenceSpec,
    probs: Vec<f64>,
}

impl SimplexDist {
    /// Validates nonnegativity and normalization (within `1e-9`).
    pub fn new(spec: SequenceSpec, probs: Vec<f64>) -> Result<Self> {
        let d = spec.num_states();
        if probs.len() as u128 != d {
            return Err(Error::domain(format!(
                "expected {d} probabilities, got {}",
                probs.len()
            )));
        }
        if probs.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
            return Err(Error::domain(
                "probabilities must be finite and nonnegative",
            ));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::domain(format!("probabilities sum to {total}")));
        }
        Ok(Self { spec, probs })
    }

    /// Normalizes nonnegative weights.
    pub fn from_weights(spec: SequenceSpec, weights: &[f64]) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::domain(
                "weights must be nonnegative with positive sum",
            ));
        }
        Self::new(spec, weights.iter().map(|w| w / total).collect())
    }

    /// Clips tiny negative round-off to zero and renormalizes.
    fn from_integrated(spec: SequenceSpec, mut probs: Vec<f64>) -> Result<Self> {
        if let Some(&bad) = probs.iter().find(|&&p| p < -1e-12 || !p.is_finite()) {
            return Err(Error::domain(format!(
                "integration left the simplex: entry {bad}"
            )));
        }
        for p in probs.iter_mut() {
            *p = p.max(0.0);
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::domain(format!(
                "integration lost mass: total {total}"
            )));
        }
        probs.iter_mut().for_each(|p| *p /= total);
        Self::new(spec, probs)
    }

    pub fn uniform(spec: SequenceSpec, cap: usize) -> Result<Self> {
        let d = spec.oracle_states(cap)?;
        Self::new(spec, vec![1.0 / d as f64; d])
    }

    pub fn point(spec: SequenceSpec, x: &[usize], cap: usize) -> Result<Self> {
        spec.check(x)?;
        let codec = IndexCodec::new(spec, cap)?;
        let mut probs = vec![0.0; codec.num_states()];
        probs[codec.encode(x)] = 1.0;
        Self::new(spec, probs)
    }

    pub fn spec(&self) -> &SequenceSpec {
        &self.spec
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn codec(&self) -> IndexCodec {
        IndexCodec {
            spec: self.spec,
            d: self.probs.len(),
        }
    }

    pub fn prob(&self, x: &[usize]) -> f64 {
        self.probs[self.codec().encode(x)]
    }

    pub fn total_variation(&self, other: &SimplexDist) -> f64 {
        0.5 * self
            .probs
            .iter()
            .zip(&other.probs)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
    }

    /// `KL(self || other)`; infinite when the support is not contained.
    pub fn kl(&self, other: &SimplexDist) -> f64 {
        self.probs
            .iter()
            .zip(&other.probs)
            .filter(|(p, _)| **p > 0.0)
            .map(|(p, q)| {
                if *q > 0.0 {
                    p * (p / q).ln()
                } else {
                    f64::INFINITY
                }
            })
            .sum()
    }

    /// Empirical distribution of a sample.
    pub fn empirical(spec: SequenceSpec, samples: &[Vec<usize>], cap: usize) -> Result<Self> {
        let codec = IndexCodec::new(spec, cap)?;
        if samples.is_empty() {
            return Err(Error::domain("empirical distribution of an empty sample"));
        }
        let mut counts = vec![0.0; codec.num_states()];
        for s in samples {
            spec.check(s)?;
            counts[codec.encode(s)] += 1.0;
        }
        Self::from_weights(spec, &counts)
    }
}

/// Noise-free start of the reverse process: uniform, or all-mask for the absorbing kind.
pub fn reference_distribution(
    spec: SequenceSpec,
    g: &TokenGenerator,
    cap: usize,
) -> Result<SimplexDist> {
    match g.reference_token() {
        None => SimplexDist::uniform(spec, cap),
        Some(mask) => SimplexDist::point(spec, &vec![mask; spec.len()], cap),
    }
}

/// Applies the product kernel `K (x) K (x) ... (x) K` to a dense distribution.
pub fn apply_product_kernel(codec: &IndexCodec, k: &TransitionKernel, p: &[f64]) -> Vec<f64> {
    let m = codec.spec().m();
    let mut cur = p.to_vec();
    let mut next = vec![0.0; cur.len()];
    for pos in 0..codec.spec().len() {
        let stride = codec.stride(pos);
        next.iter_mut().for_each(|v| *v = 0.0);
        for (idx, &mass) in cur.iter().enumerate() {
            if mass == 0.0 {
                continue;
            }
            let a = (idx / stride) % m;
            let base = idx - a * stride;
            for b in 0..m {
                next[base + b * stride] += k.prob(b, a) * mass;
            }
        }
        std::mem::swap(&mut cur, &mut next);
    }
    cur
}

/// `Q p` for a sequence-level generator given by its neighbor rates at each state.
pub fn apply_rates<F>(codec: &IndexCodec, p: &[f64], mut rates_at: F) -> Result<Vec<f64>>
where
    F: FnMut(&[usize]) -> Result<NeighborRates>,
{
    let m = codec.spec().m();
    let mut out = vec![0.0; p.len()];
    let mut x = vec![0; codec.spec().len()];
    for (idx, &mass) in p.iter().enumerate() {
        if mass == 0.0 {
            continue;
        }
        codec.decode_into(idx, &mut x);
        let rates = rates_at(&x)?;
        for (i, &xi) in x.iter().enumerate() {
            let stride = codec.stride(i);
            for b in (0..m).filter(|&b| b != xi) {
                let r = rates.rate(i, b);
                if r != 0.0 {
                    let j = idx - xi * stride + b * stride;
                    out[j] += r * mass;
                    out[idx] -= r * mass;
                }
            }
        }
    }
    Ok(out)
}

/// Materializes the dense `d x d` generator, entry `[target * d + source]`.
pub fn assemble_generator<F>(codec: &IndexCodec, mut rates_at: F) -> Result<Vec<f64>>
where
    F: FnMut(&[usize]) -> Result<NeighborRates>,
{
    let d = codec.num_states();
    let m = codec.spec().m();
    let mut q = vec![0.0; d * d];
    let mut x = vec![0; codec.spec().len()];
    for src in 0..d {
        codec.decode_into(src, &mut x);
        let rates = rates_at(&x)?;
        for (i, &xi) in x.iter().enumerate() {
            let stride = codec.stride(i);
            for b in (0..m).filter(|&b| b != xi) {
                let tgt = src - xi * stride + b * stride;
                q[tgt * d + src] += rates.rate(i, b);
                q[src * d + src] -= rates.rate(i, b);
            }
        }
    }
    Ok(q)
}

pub fn mat_vec(a: &[f64], x: &[f64]) -> Vec<f64> {
    let d = x.len();
    (0..d)
        .map(|r| {
            a[r * d..(r + 1) * d]
                .iter()
                .zip(x)
                .map(|(u, v)| u * v)
                .sum()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Integrator {
    Euler,
    Rk4,
}

/// Default number of integration steps for oracle ODEs.
pub const DEFAULT_ORACLE_STEPS: usize = 512;

fn ode_step<F>(f: &mut F, integrator: Integrator, t: f64, h: f64, p: &[f64]) -> Result<Vec<f64>>
where
    F: FnMut(f64, &[f64]) -> Result<Vec<f64>>,
{
    let axpy = |a: &[f64], s: f64, b: &[f64]| -> Vec<f64> {
        a.iter().zip(b).map(|(u, v)| u + s * v).collect()
    };
    match integrator {
        Integrator::Euler => Ok(axpy(p, h, &f(t, p)?)),
        Integrator::Rk4 => {
            let k1 = f(t, p)?;
            let k2 = f(t + h / 2.0, &axpy(p, h / 2.0, &k1))?;
            let k3 = f(t + h / 2.0, &axpy(p, h / 2.0, &k2))?;
            let k4 = f(t + h, &axpy(p, h, &k3))?;
            Ok(p.iter()
                .enumerate()
                .map(|(i, v)| v + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
                .collect())
        }
    }
}

/// Integrates `dp/dt = sigma(t) (sum_i base_i) p` from 0 to `t` on the full space.
pub fn exact_forward_marginals(
    p0: &SimplexDist,
    g: &TokenGenerator,
    sched: &NoiseSchedule,
    t: f64,
    steps: usize,
    integrator: Integrator,
) -> Result<SimplexDist> {
    if steps == 0 {
        return Err(Error::domain("steps must be >= 1"));
    }
    sched.check_time(t)?;
    let codec = p0.codec();
    let m = g.m();
    let mut field = |s: f64, p: &[f64]| -> Result<Vec<f64>> {
        let sigma = sched.rate(s);
        apply_rates(&codec, p, |x| {
            let mut r = NeighborRates::zeros(x.len(), m);
            for (i, &xi) in x.iter().enumerate() {
                for b in (0..m).filter(|&b| b != xi) {
                    *r.rate_mut(i, b) = sigma * g.base(b, xi);
                }
            }
            Ok(r)
        })
    };
    let h = t / steps as f64;
    let mut p = p0.probs().to_vec();
    for k in 0..steps {
        p = ode_step(&mut field, integrator, k as f64 * h, h, &p)?;
        if p.iter().any(|v| *v < -1e-12) {
            return Err(Error::domain(
                "forward integration left the simplex; increase steps",
            ));
        }
    }
    SimplexDist::from_integrated(*p0.spec(), p)
}

/// Closed-form forward marginal `p_t = K_{0,t}^{(x) n} p0`.
pub fn closed_form_forward_marginals(
    p0: &SimplexDist,
    g: &TokenGenerator,
    sched: &NoiseSchedule,
    t: f64,
) -> Result<SimplexDist> {
    sched.check_time(t)?;
    let k = TransitionKernel::from_noise(g, sched.cumulative(t));
    SimplexDist::from_integrated(
        *p0.spec(),
        apply_product_kernel(&p0.codec(), &k, p0.probs()),
    )
}

/// `p(y) / p(x)` for every Hamming-1 neighbor `y` of `x`.
///
/// The returned table carries no time (`time()` is NaN).
pub fn exact_ratios(p: &SimplexDist, x: &[usize]) -> Result<NeighborTable> {
    p.spec().check(x)?;
    let codec = p.codec();
    let idx = codec.encode(x);
    let px = p.probs()[idx];
    if !(px > 0.0) {
        return Err(Error::domain("ratio undefined: p(x) = 0"));
    }
    let m = p.spec().m();
    let mut table = NeighborTable::filled(x, f64::NAN, m, 0.0);
    for (i, &xi) in x.iter().enumerate() {
        let stride = codec.stride(i);
        for b in (0..m).filter(|&b| b != xi) {
            table.set(i, b, p.probs()[idx - xi * stride + b * stride] / px);
        }
    }
    Ok(table)
}

/// Reverse-time grid in forward time, from `T` down to `T - t0`.
///
/// When the grid reaches `t = 0`, the final interval is refined geometrically
/// and integration stops at `1e-12 T`: exact ratios are singular like `1/t`
/// at states without data mass, and the omitted mass is `O(1e-12)`.
fn reverse_grid(horizon: f64, t0: f64, steps: usize) -> Vec<f64> {
    let end = horizon - t0;
    let h = t0 / steps as f64;
    let mut grid: Vec<f64> = (0..=steps).map(|k| horizon - k as f64 * h).collect();
    *grid.last_mut().expect("nonempty") = end;
    if end <= 1e-15 * horizon && steps >= 1 {
        grid.pop();
        let mut t = *grid.last().expect("nonempty") / 2.0;
        while t > 1e-12 * horizon {
            grid.push(t);
            t /= 2.0;
        }
    }
    grid
}

/// Integrates the reverse ODE `dq/dtau = Qbar_{T - tau} q` from `p_ref` to `tau = t0`.
pub fn exact_policy_dist<S: ScoreModel + ?Sized>(
    score: &S,
    g: &TokenGenerator,
    sched: &NoiseSchedule,
    t0: f64,
    steps: usize,
    cap: usize,
) -> Result<SimplexDist> {
    let horizon = sched.horizon();
    if !(t0 >= 0.0 && t0 <= horizon) {
        return Err(Error::domain(format!("T0 = {t0} outside [0, {horizon}]")));
    }
    let spec = *score.spec();
    let start = reference_distribution(spec, g, cap)?;
    if t0 == 0.0 {
        return Ok(start);
    }
    let codec = start.codec();
    let steps = steps.max(1);
    // Field in forward time with the sign of d/dtau = -d/dt folded in.
    let field = |t: f64, q: &[f64]| -> Result<Vec<f64>> {
        let t = t.clamp(0.0, horizon);
        apply_rates(&codec, q, |x| {
            reverse_rates(g, sched, t, x, &score.eval_score(x, t)?)
        })
    };
    let grid = reverse_grid(horizon, t0, steps);
    let mut q = start.probs().to_vec();
    for w in grid.windows(2) {
        let (t_hi, t_lo) = (w[0], w[1]);
        // Integrate in tau; the field is evaluated at forward time T - tau.
        let tau = horizon - t_hi;
        let mut f = |s: f64, v: &[f64]| field(horizon - s, v);
        q = ode_step(&mut f, Integrator::Rk4, tau, t_hi - t_lo, &q)?;
    }
    SimplexDist::from_integrated(spec, q)
}

/// Objective `l(theta) = -E_{x ~ q_{T0}}[R(x)]` evaluated through the exact policy.
pub fn exact_loss<S, R>(
    score: &S,
    reward: R,
    g: &TokenGenerator,
    sched: &NoiseSchedule,
    t0: f64,
    steps: usize,
    cap: usize,
) -> Result<f64>
where
    S: ScoreModel + ?Sized,
    R: Fn(&[usize]) -> f64,
{
    let q = exact_policy_dist(score, g, sched, t0, steps, cap)?;
    let codec = q.codec();
    Ok(-q
        .probs()
        .iter()
        .enumerate()
        .map(|(i, p)| p * reward(&codec.decode(i)))
        .sum::<f64>())
}

/// Central-difference gradient of [`exact_loss`]; non-finite parameters are skipped.
#[allow(clippy::too_many_arguments)]
pub fn exact_loss_gradient_fd<S, R>(
    score: &S,
    reward: R,
    g: &TokenGenerator,
    sched: &NoiseSchedule,
    t0: f64,
    h: f64,
    steps: usize,
    cap: usize,
) -> Result<Vec<f64>>
where
    S: ScoreModel + Clone,
    R: Fn(&[usize]) -> f64 + Copy,
{
    let base = score.params().to_vec();
    let mut work = score.clone();
    let mut grad = vec![0.0; base.len()];
    for k in 0..base.len() {
        if !base[k].is_finite() {
            continue;
        }
        let mut p = base.clone();
        p[k] = base[k] + h;
        work.set_params(&p)?;
        let up = exact_loss(&work, reward, g, sched, t0, steps, cap)?;
        p[k] = base[k] - h;
        work.set_params(&p)?;
        let down = exact_loss(&work, reward, g, sched, t0, steps, cap)?;
        grad[k] = (up - down) / (2.0 * h);
    }
    Ok(grad)
}

/// Jacobian `d q_{T0}(x) / d theta_k` by central differences, row-major `d x p`.
pub fn exact_policy_jacobian_fd<S>(
    score: &S,
    g: &TokenGenerator,
    sched: &NoiseSchedule,
    t0: f64,
    h: f64,
    steps: usize,
    cap: usize,
) -> Result<Vec<f64>>
where
    S: ScoreModel + Clone,
{
    let base = score.params().to_vec();
    let np = base.len();
    let mut work = score.clone();
    let d = score.spec().oracle_states(cap)?;
    let mut jac = vec![0.0; d * np];
    for k in 0..np {
        if !base[k].is_finite() {
            continue;
        }
        let mut p = base.clone();
        p[k] = base[k] + h;
        work.set_params(&p)?;
        let up = exact_policy_dist(&work, g, sched, t0, steps, cap)?;
        p[k] = base[k] - h;
        work.set_params(&p)?;
        let down = exact_policy_dist(&work, g, sched, t0, steps, cap)?;
        for x in 0..d {
            jac[x * np + k] = (up.probs()[x] - down.probs()[x]) / (2.0 * h);
        }
    }
    Ok(jac)
}

/// Exact evolution of a distribution under the sequence-level Euler kernel
/// `I + dt (Q_t + Qbar_t)` at fixed forward time `t`. Returns every iterate,
/// starting with `q0`.
pub fn exact_corrector_evolution<S: ScoreModel + ?Sized>(
    q0: &SimplexDist,
    score: &S,
    g: &TokenGenerator,
    sched: &NoiseSchedule,
    t: f64,
    dt: f64,
    iterations: usize,
) -> Result<Vec<SimplexDist>> {
    let codec = q0.codec();
    let mut out = vec![q0.clone()];
    let mut cur = q0.probs().to_vec();
    for _ in 0..iterations {
        let dq = apply_rates(&codec, &cur, |x| {
            crate::ctmc::corrector_rates(g, sched, t, x, &score.eval_score(x, t)?)
        })?;
        cur = cur.iter().zip(&dq).map(|(p, d)| p + dt * d).collect();
        out.push(SimplexDist::from_integrated(*q0.spec(), cur.clone())?);
    }
    Ok(out)
}

/// Largest `dt` for which `I + dt Q` is stochastic, given the dense generator.
pub fn max_stochastic_dt(q: &[f64], d: usize) -> f64 {
    let worst = (0..d).map(|i| -q[i * d + i]).fold(0.0, f64::max);
    if worst > 0.0 {
        1.0 / worst
    } else {
        f64::INFINITY
    }
}

/// Solves `A X = B` by Gaussian elimination with partial pivoting.
/// `a` is `n x n` row-major and `b` is `n x p` row-major.
pub fn dense_solve(a: &[f64], b: &[f64], n: usize, p: usize) -> Result<Vec<f64>> {
    if a.len() != n * n || b.len() != n * p {
        return Err(Error::domain("dense_solve: shape mismatch"));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))
            .expect("nonempty range");
        let pv = a[piv * n + col];
        if pv.abs() < 1e-300 {
            return Err(Error::Singular(pv.abs()));
        }
        if piv != col {
            for k in 0..n {
                a.swap(piv * n + k, col * n + k);
            }
            for k in 0..p {
                b.swap(piv * p + k, col * p + k);
            }
        }
        for r in col + 1..n {
            let f = a[r * n + col] / pv;
            if f == 0.0 {
                continue;
            }
            for k in col..n {
                a[r * n + k] -= f * a[col * n + k];
            }
            for k in 0..p {
                b[r * p + k] -= f * b[col * p + k];
            }
        }
    }
    let mut x = vec![0.0; n * p];
    for r in (0..n).rev() {
        for k in 0..p {
            let s: f64 = (r + 1..n).map(|c| a[r * n + c] * x[c * p + k]).sum();
            x[r * p + k] = (b[r * p + k] - s) / a[r * n + r];
        }
    }
    Ok(x)
}

/// Euclidean projection onto the simplex by bisection on the threshold,
/// independent of the sorting rule used by `implicit::sparsemax`.
pub fn simplex_projection_qp(z: &[f64]) -> Vec<f64> {
    let excess = |tau: f64| z.iter().map(|v| (v - tau).max(0.0)).sum::<f64>() - 1.0;
    let hi0 = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (mut lo, mut hi) = (hi0 - 1.0, hi0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if excess(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    // Polish: the threshold is exact on the identified support.
    let tau0 = 0.5 * (lo + hi);
    let support: Vec<usize> = (0..z.len()).filter(|&i| z[i] > tau0).collect();
    let tau = (support.iter().map(|&i| z[i]).sum::<f64>() - 1.0) / support.len() as f64;
    z.iter().map(|v| (v - tau).max(0.0)).collect()
}

/// Whether `g` is the absorbing kind (helper for oracle callers).
pub fn is_absorbing(g: &TokenGenerator) -> bool {
    g.kind() == GeneratorKind::Absorbing
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctmc::{build_generator, forward_rates, ScheduleKind, Vocab, DEFAULT_ORACLE_CAP};
    use crate::score::{teacher_score, ScoreParams};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn spec(n: usize, m: usize, mask: Option<usize>) -> SequenceSpec {
        SequenceSpec::new(n, Vocab::new(m, mask).unwrap()).unwrap()
    }

    fn random_dist(sp: SequenceSpec, seed: u64) -> SimplexDist {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let d = sp.num_states() as usize;
        let w: Vec<f64> = (0..d).map(|_| rng.gen::<f64>() + 0.05).collect();
        SimplexDist::from_weights(sp, &w).unwrap()
    }

    proptest! {
        #[test]
        fn codec_round_trip(n in 1usize..5, m in 2usize..5) {
            let c = IndexCodec::new(spec(n, m, None), DEFAULT_ORACLE_CAP).unwrap();
            for i in 0..c.num_states() {
                prop_assert_eq!(c.encode(&c.decode(i)), i);
            }
        }
    }

    #[test]
    fn forward_m2_n1_closed_form() {
        let sp = spec(1, 2, None);
        let g = build_generator(GeneratorKind::Uniform, sp.vocab()).unwrap();
        let sched = NoiseSchedule::constant(1.0, 2.0).unwrap();
        let p0 = SimplexDist::new(sp, vec![1.0, 0.0]).unwrap();
        for t in [0.1f64, 0.5, 1.0, 2.0] {
            let e = (-t).exp();
            for integ in [Integrator::Rk4, Integrator::Euler] {
                let steps = if integ == Integrator::Rk4 {
                    512
                } else {
                    200_000
                };
                let p = exact_forward_marginals(&p0, &g, &sched, t, steps, integ).unwrap();
                assert_abs_diff_eq!(p.probs()[0], (1.0 + e) / 2.0, epsilon = 1e-6);
                assert_abs_diff_eq!(p.probs()[1], (1.0 - e) / 2.0, epsilon = 1e-6);
            }
        }
        let p = exact_forward_marginals(&p0, &g, &sched, 0.0, 4, Integrator::Rk4).unwrap();
        assert_eq!(p.probs(), &[1.0, 0.0]);
    }

    #[test]
    fn forward_integration_matches_product_kernel() {
        let sp = spec(3, 3, Some(2));
        let sched = NoiseSchedule::default();
        for kind in [GeneratorKind::Uniform, GeneratorKind::Absorbing] {
            let g = build_generator(kind, sp.vocab()).unwrap();
            let p0 = random_dist(sp, 11);
            let a = exact_forward_marginals(&p0, &g, &sched, 0.7, 512, Integrator::Rk4).unwrap();
            let b = closed_form_forward_marginals(&p0, &g, &sched, 0.7).unwrap();
            assert!(a.total_variation(&b) < 1e-9);
        }
    }

    #[test]
    fn forward_long_time_is_uniform() {
        let sp = spec(2, 3, None);
        let g = build_generator(GeneratorKind::Uniform, sp.vocab()).unwrap();
        let sched = NoiseSchedule::constant(1.0, 30.0).unwrap();
        let p =
            exact_forward_marginals(&random_dist(sp, 2), &g, &sched, 30.0, 2000, Integrator::Rk4)
                .unwrap();
        for v in p.probs() {
            assert_abs_diff_eq!(*v, 1.0 / 9.0, epsilon = 1e-4);
        }
    }

    #[test]
    fn exact_ratios_examples() {
        let sp = spec(1, 2, None);
        let p = SimplexDist::from_weights(sp, &[2.0, 1.0]).unwrap();
        assert_abs_diff_eq!(
            exact_ratios(&p, &[0]).unwrap().value(0, 1),
            0.5,
            epsilon = 1e-15
        );
        let zero = SimplexDist::new(sp, vec![0.0, 1.0]).unwrap();
        assert!(matches!(exact_ratios(&zero, &[0]), Err(Error::Domain(_))));

        let sp = spec(2, 3, None);
        let p = random_dist(sp, 5);
        let codec = p.codec();
        for idx in 0..9 {
            let x = codec.decode(idx);
            let table = exact_ratios(&p, &x).unwrap();
            for (i, b, v) in table.neighbors() {
                let mut y = x.clone();
                y[i] = b;
                assert_abs_diff_eq!(v, p.prob(&y) / p.prob(&x), epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn time_reversal_identity() {
        let sp = spec(2, 3, Some(2));
        let sched = NoiseSchedule::default();
        for kind in [GeneratorKind::Uniform, GeneratorKind::Absorbing] {
            let g = build_generator(kind, sp.vocab()).unwrap();
            let pt = closed_form_forward_marginals(&random_dist(sp, 8), &g, &sched, 0.4).unwrap();
            let codec = pt.codec();
            let fwd =
                apply_rates(&codec, pt.probs(), |x| forward_rates(&g, &sched, 0.4, x)).unwrap();
            let rev = apply_rates(&codec, pt.probs(), |x| {
                reverse_rates(&g, &sched, 0.4, x, &exact_ratios(&pt, x)?)
            })
            .unwrap();
            for (a, b) in fwd.iter().zip(&rev) {
                assert!((a + b).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn reverse_rates_match_full_reversal_m2_n1() {
        let sp = spec(1, 2, None);
        let g = build_generator(GeneratorKind::Uniform, sp.vocab()).unwrap();
        let sched = NoiseSchedule::default();
        let pt = closed_form_forward_marginals(
            &SimplexDist::new(sp, vec![0.9, 0.1]).unwrap(),
            &g,
            &sched,
            0.5,
        )
        .unwrap();
        // Time reversal of a 2-state chain: Qbar(x -> y) = Q(y -> x) p(y) / p(x).
        let sigma = sched.rate(0.5);
        for x in 0..2 {
            let y = 1 - x;
            let rev =
                reverse_rates(&g, &sched, 0.5, &[x], &exact_ratios(&pt, &[x]).unwrap()).unwrap();
            let expect = sigma * 0.5 * pt.probs()[y] / pt.probs()[x];
            assert_abs_diff_eq!(rev.rate(0, y), expect, epsilon = 1e-14);
        }
    }

    #[test]
    fn policy_round_trip_with_teacher() {
        let sched = NoiseSchedule::new(ScheduleKind::Linear, 1e-3, 20.0, 1.0).unwrap();
        for (kind, mask) in [
            (GeneratorKind::Uniform, None),
            (GeneratorKind::Absorbing, Some(2)),
        ] {
            let sp = spec(2, 3, mask);
            let g = build_generator(kind, sp.vocab()).unwrap();
            let mut w = random_dist(sp, 4).probs().to_vec();
            w[3] = 0.0;
            if let Some(mk) = mask {
                // no data mass on masked sequences
                let codec = IndexCodec::new(sp, 4096).unwrap();
                for (i, v) in w.iter_mut().enumerate() {
                    if codec.decode(i).contains(&mk) {
                        *v = 0.0;
                    }
                }
            }
            let p0 = SimplexDist::from_weights(sp, &w).unwrap();
            let teacher = teacher_score(&g, &sched, &p0).unwrap();
            let q = exact_policy_dist(&teacher, &g, &sched, 1.0, 512, 4096).unwrap();
            assert!(
                q.total_variation(&p0) < 1e-4,
                "{kind:?}: {}",
                q.total_variation(&p0)
            );
        }
    }

    #[test]
    fn policy_trivial_cases() {
        let sp = spec(2, 2, None);
        let g = build_generator(GeneratorKind::Uniform, sp.vocab()).unwrap();
        let sched = NoiseSchedule::default();
        let s = ScoreParams::new(sp, GeneratorKind::Uniform, 1.0, 4, false).unwrap();
        let q0 = exact_policy_dist(&s, &g, &sched, 0.0, 16, 4096).unwrap();
        assert_eq!(q0, SimplexDist::uniform(sp, 4096).unwrap());
        let q = exact_policy_dist(&s, &g, &sched, 1.0, 64, 4096).unwrap();
        assert_abs_diff_eq!(q.probs().iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn fd_gradient_trivial_rewards() {
        let sp = spec(2, 2, None);
        let g = build_generator(GeneratorKind::Uniform, sp.vocab()).unwrap();
        let sched = NoiseSchedule::default();
        let mut s = ScoreParams::new(sp, GeneratorKind::Uniform, 1.0, 2, false).unwrap();
        let mut p = s.params().to_vec();
        for (k, v) in p.iter_mut().enumerate() {
            *v = 0.1 * (k as f64).sin();
        }
        s.set_params(&p).unwrap();
        let zero = exact_loss_gradient_fd(&s, |_| 0.0, &g, &sched, 1.0, 1e-4, 64, 4096).unwrap();
        assert!(zero.iter().all(|v| *v == 0.0));
        let c = exact_loss_gradient_fd(&s, |_| 3.0, &g, &sched, 1.0, 1e-4, 64, 4096).unwrap();
        assert!(c.iter().all(|v| v.abs() < 1e-6));
        let r =
            exact_loss_gradient_fd(&s, |x| x[0] as f64, &g, &sched, 1.0, 1e-4, 64, 4096).unwrap();
        let r2 =
            exact_loss_gradient_fd(&s, |x| x[0] as f64, &g, &sched, 1.0, 5e-5, 64, 4096).unwrap();
        for (a, b) in r.iter().zip(&r2) {
            assert!((a - b).abs() < 1e-7);
        }
        assert!(r.iter().any(|v| v.abs() > 1e-4));
    }

    #[test]
    fn dense_solve_random() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let n = 12;
        let a: Vec<f64> = (0..n * n)
            .map(|k| rng.gen::<f64>() - 0.5 + if k % (n + 1) == 0 { 4.0 } else { 0.0 })
            .collect();
        let x: Vec<f64> = (0..n * 2).map(|_| rng.gen::<f64>()).collect();
        let mut b = vec![0.0; n * 2];
        for r in 0..n {
            for k in 0..2 {
                b[r * 2 + k] = (0..n).map(|c| a[r * n + c] * x[c * 2 + k]).sum();
            }
        }
        let sol = dense_solve(&a, &b, n, 2).unwrap();
        for (u, v) in sol.iter().zip(&x) {
            assert_abs_diff_eq!(u, v, epsilon = 1e-12);
        }
    }

    #[test]
    fn qp_projection_examples() {
        assert_eq!(simplex_projection_qp(&[2.0, 0.0]), vec![1.0, 0.0]);
        let p = simplex_projection_qp(&[0.2, 0.3, 0.5]);
        for (a, b) in p.iter().zip([0.2, 0.3, 0.5]) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn corrector_evolution_keeps_p_t() {
        let sp = spec(2, 2, None);
        let g = build_generator(GeneratorKind::Uniform, sp.vocab()).unwrap();
        let sched = NoiseSchedule::default();
        let p0 = random_dist(sp, 3);
        let teacher = teacher_score(&g, &sched, &p0).unwrap();
        let pt = closed_form_forward_marginals(&p0, &g, &sched, 0.5).unwrap();
        let evo = exact_corrector_evolution(&pt, &teacher, &g, &sched, 0.5, 0.05, 5).unwrap();
        for q in &evo {
            assert!(q.total_variation(&pt) < 1e-12);
        }
    }
}
