//! First-order optimizers over a flat parameter vector. Both descend.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

/// Multiplier `beta_s` applied to the learning rate at iteration `s` (1-based).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepSchedule {
    Constant,
    /// `min(1, 1/sqrt(s))`.
    InvSqrt,
}

impl StepSchedule {
    pub fn factor(self, s: usize) -> f64 {
        match self {
            StepSchedule::Constant => 1.0,
            StepSchedule::InvSqrt => (1.0 / (s.max(1) as f64).sqrt()).min(1.0),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, dim: usize) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::config(format!(
                "learning rate must be positive, got {lr}"
            )));
        }
        let (m, v) = match kind {
            OptimizerKind::Adam => (vec![0.0; dim], vec![0.0; dim]),
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
        };
        Ok(Self {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m,
            v,
            steps: 0,
        })
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// One descent step with learning rate `lr * scale`. Non-finite parameters
    /// (pinned entries) are left untouched.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], scale: f64) -> Result<()> {
        if params.len() != grad.len() {
            return Err(Error::domain(
                "gradient length differs from parameter length",
            ));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::domain("non-finite gradient"));
        }
        let lr = self.lr * scale;
        self.steps += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    if p.is_finite() {
                        *p -= lr * g;
                    }
                }
            }
            OptimizerKind::Adam => {
                if self.m.len() != params.len() {
                    return Err(Error::domain("optimizer state has the wrong dimension"));
                }
                let bc1 = 1.0 - self.beta1.powi(self.steps as i32);
                let bc2 = 1.0 - self.beta2.powi(self.steps as i32);
                for i in 0..params.len() {
                    if !params[i].is_finite() {
                        continue;
                    }
                    self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
                    self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                    let mhat = self.m[i] / bc1;
                    let vhat = self.v[i] / bc2;
                    params[i] -= lr * mhat / (vhat.sqrt() + self.eps);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inv_sqrt_schedule() {
        assert_eq!(StepSchedule::InvSqrt.factor(1), 1.0);
        assert_eq!(StepSchedule::InvSqrt.factor(4), 0.5);
        assert_eq!(StepSchedule::Constant.factor(100), 1.0);
    }

    #[test]
    fn both_minimize_a_quadratic() {
        for kind in [OptimizerKind::Adam, OptimizerKind::Sgd] {
            let mut opt = Optimizer::new(kind, 0.1, 2).unwrap();
            let mut p = vec![3.0, -2.0];
            for _ in 0..500 {
                let g: Vec<f64> = p.iter().map(|x| 2.0 * x).collect();
                opt.step(&mut p, &g, 1.0).unwrap();
            }
            assert!(p.iter().all(|x| x.abs() < 1e-2), "{kind:?}: {p:?}");
        }
    }

    #[test]
    fn first_adam_step_has_size_lr_and_pinned_entries_stay() {
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.01, 3).unwrap();
        let mut p = vec![1.0, f64::NEG_INFINITY, 0.0];
        opt.step(&mut p, &[5.0, 1.0, -1e-3], 1.0).unwrap();
        assert!((p[0] - 0.99).abs() < 1e-9);
        assert_eq!(p[1], f64::NEG_INFINITY);
        assert!((p[2] - 0.01).abs() < 1e-6);
        assert!(opt.step(&mut p, &[f64::NAN, 0.0, 0.0], 1.0).is_err());
        assert!(Optimizer::new(OptimizerKind::Sgd, 0.0, 1).is_err());
    }
}
