//! Implicit differentiation through the simplex projection: sparsemax, its
//! support size, the rank-one linear system and its Sherman–Morrison solve.
//!
//! The fixed point `pi = sparsemax(pi - eta * grad G(pi))` with the KL
//! objective `G` yields the system `A X = B` with
//! `A = D [I - eta diag(1/pi)] - I`, `B = -eta D diag(1/pi) grad_pi` and
//! `D = diag(r) - r r^T / k`, `r` the indicator of the support. On the
//! support, `A = -(M + u v^T)` with `M = diag(eta / pi)`, `u = 1/k`,
//! `v = 1 - eta / pi`, and `M = 1`, `u = v = 0` off it.
//!
//! Matrices are row-major; a `d x p` gradient has one row per state.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SparsemaxResult {
    pub projection: Vec<f64>,
    /// Indices with positive mass, ascending.
    pub support: Vec<usize>,
    pub tau: f64,
}

fn sorted_desc(z: &[f64]) -> Vec<f64> {
    let mut s = z.to_vec();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// `k_h = max { k : 1 + k z_(k) > sum_{j <= k} z_(j) }` over coordinates sorted descending.
pub fn support_size(z: &[f64]) -> usize {
    let s = sorted_desc(z);
    let mut acc = 0.0;
    let mut k_h = 0;
    for (k, v) in s.iter().enumerate() {
        acc += v;
        if 1.0 + (k + 1) as f64 * v > acc {
            k_h = k + 1;
        }
    }
    k_h
}

/// Euclidean projection onto the probability simplex.
pub fn sparsemax(z: &[f64]) -> Result<SparsemaxResult> {
    if z.is_empty() || z.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("sparsemax needs a nonempty finite vector"));
    }
    let k = support_size(z);
    let s = sorted_desc(z);
    let tau = (s[..k].iter().sum::<f64>() - 1.0) / k as f64;
    let projection: Vec<f64> = z.iter().map(|v| (v - tau).max(0.0)).collect();
    let support = (0..z.len()).filter(|&i| projection[i] > 0.0).collect();
    Ok(SparsemaxResult {
        projection,
        support,
        tau,
    })
}

/// `(diag(diag) + u v^T) X = rhs` with `rhs` of shape `d x p`.
#[derive(Debug, Clone, PartialEq)]
pub struct RankOneSystem {
    pub diag: Vec<f64>,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub rhs: Vec<f64>,
    pub p: usize,
}

impl RankOneSystem {
    pub fn d(&self) -> usize {
        self.diag.len()
    }

    /// Dense `d x d` matrix `diag + u v^T`.
    pub fn dense_matrix(&self) -> Vec<f64> {
        let d = self.d();
        let mut a = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                a[i * d + j] = self.u[i] * self.v[j] + if i == j { self.diag[i] } else { 0.0 };
            }
        }
        a
    }
}

/// Smallest admissible magnitude of a diagonal entry.
pub const DIAG_FLOOR: f64 = 1e-12;
/// Smallest admissible `|1 + v^T M^-1 u|`.
pub const SM_DENOMINATOR_FLOOR: f64 = 1e-10;

/// `X = M^-1 rhs - M^-1 u (v^T M^-1 rhs) / (1 + v^T M^-1 u)`.
pub fn sherman_morrison_solve(sys: &RankOneSystem) -> Result<Vec<f64>> {
    let d = sys.d();
    let p = sys.p;
    if sys.u.len() != d || sys.v.len() != d || sys.rhs.len() != d * p {
        return Err(Error::domain("rank-one system: shape mismatch"));
    }
    if let Some(bad) = sys.diag.iter().find(|m| !(m.abs() >= DIAG_FLOOR)) {
        return Err(Error::domain(format!(
            "diagonal entry {bad} below floor {DIAG_FLOOR}"
        )));
    }
    let minv_u: Vec<f64> = sys.u.iter().zip(&sys.diag).map(|(u, m)| u / m).collect();
    let den = 1.0 + sys.v.iter().zip(&minv_u).map(|(v, w)| v * w).sum::<f64>();
    if !(den.abs() >= SM_DENOMINATOR_FLOOR) {
        return Err(Error::Singular(den.abs()));
    }
    let mut x: Vec<f64> = (0..d * p).map(|k| sys.rhs[k] / sys.diag[k / p]).collect();
    for c in 0..p {
        let vt: f64 = (0..d).map(|i| sys.v[i] * x[i * p + c]).sum::<f64>() / den;
        for i in 0..d {
            x[i * p + c] -= minv_u[i] * vt;
        }
    }
    Ok(x)
}

/// Indices of the `k_h` largest entries of `pi` (ties broken by index).
pub fn top_support(pi: &[f64], k_h: usize) -> Result<Vec<usize>> {
    if k_h == 0 || k_h > pi.len() {
        return Err(Error::domain(format!(
            "k_h = {k_h} outside [1, {}]",
            pi.len()
        )));
    }
    let mut idx: Vec<usize> = (0..pi.len()).collect();
    idx.sort_by(|&a, &b| pi[b].total_cmp(&pi[a]).then(a.cmp(&b)));
    idx.truncate(k_h);
    if idx.iter().any(|&i| !(pi[i] > 0.0)) {
        return Err(Error::Degenerate(
            "pi must be positive on the top-k support".into(),
        ));
    }
    idx.sort_unstable();
    Ok(idx)
}

/// Dense `(A, B)` of the implicit system straight from its definition, with the
/// support given by the top `k_h` entries of `pi`. `1/pi` is only formed on
/// the support, where `D` is nonzero.
pub fn implicit_system_dense(
    pi: &[f64],
    grad_pi: &[f64],
    p: usize,
    k_h: usize,
    eta: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = pi.len();
    let support = top_support(pi, k_h)?;
    let mut r = vec![0.0; d];
    for &i in &support {
        r[i] = 1.0;
    }
    let inv: Vec<f64> = (0..d)
        .map(|i| if r[i] > 0.0 { 1.0 / pi[i] } else { 0.0 })
        .collect();
    let dmat = |i: usize, j: usize| -> f64 {
        (if i == j { r[i] } else { 0.0 }) - r[i] * r[j] / k_h as f64
    };
    let mut a = vec![0.0; d * d];
    let mut b = vec![0.0; d * p];
    for i in 0..d {
        for j in 0..d {
            a[i * d + j] = dmat(i, j) * (1.0 - eta * inv[j]) - if i == j { 1.0 } else { 0.0 };
        }
        for c in 0..p {
            b[i * p + c] = -eta
                * (0..d)
                    .map(|j| dmat(i, j) * inv[j] * grad_pi[j * p + c])
                    .sum::<f64>();
        }
    }
    Ok((a, b))
}

/// The same system as a rank-one update, `(M + u v^T) X = -B`.
pub fn implicit_system(
    pi: &[f64],
    grad_pi: &[f64],
    p: usize,
    k_h: usize,
    eta: f64,
) -> Result<RankOneSystem> {
    if !(eta > 0.0) {
        return Err(Error::domain("eta must be positive"));
    }
    let d = pi.len();
    if grad_pi.len() != d * p {
        return Err(Error::domain("gradient shape does not match pi"));
    }
    let (_, b) = implicit_system_dense(pi, grad_pi, p, k_h, eta)?;
    let support = top_support(pi, k_h)?;
    let mut diag = vec![1.0; d];
    let mut u = vec![0.0; d];
    let mut v = vec![0.0; d];
    for &i in &support {
        diag[i] = eta / pi[i];
        u[i] = 1.0 / k_h as f64;
        v[i] = 1.0 - eta / pi[i];
    }
    Ok(RankOneSystem {
        diag,
        u,
        v,
        rhs: b.iter().map(|x| -x).collect(),
        p,
    })
}

/// Weights `z_i = k_h pi_i / sum_{support} pi` on the top-`k_h` support, 0 elsewhere.
pub fn support_weights(pi: &[f64], k_h: usize) -> Result<Vec<f64>> {
    let support = top_support(pi, k_h)?;
    let mass: f64 = support.iter().map(|&i| pi[i]).sum();
    let mut z = vec![0.0; pi.len()];
    for &i in &support {
        z[i] = k_h as f64 * pi[i] / mass;
    }
    Ok(z)
}

/// Solution of the implicit system in closed form: on the support
/// `X_i = grad_i - pi_i (sum_S grad) / (sum_S pi)`, zero elsewhere.
///
/// Equivalently `X_i = grad_i - (z_i / k_h) sum_S grad`. It does not depend on
/// `eta`, and reduces to `grad_pi` when the support is everything and the
/// gradient columns sum to zero.
pub fn corrected_gradient(pi: &[f64], grad_pi: &[f64], p: usize, k_h: usize) -> Result<Vec<f64>> {
    let d = pi.len();
    if grad_pi.len() != d * p {
        return Err(Error::domain("gradient shape does not match pi"));
    }
    let support = top_support(pi, k_h)?;
    let mass: f64 = support.iter().map(|&i| pi[i]).sum();
    if !(mass > 0.0) {
        return Err(Error::Degenerate("zero mass on the support".into()));
    }
    let mut col = vec![0.0; p];
    for &i in &support {
        for c in 0..p {
            col[c] += grad_pi[i * p + c];
        }
    }
    let mut x = vec![0.0; d * p];
    for &i in &support {
        for c in 0..p {
            x[i * p + c] = grad_pi[i * p + c] - pi[i] * col[c] / mass;
        }
    }
    Ok(x)
}
