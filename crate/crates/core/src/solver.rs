//! Weight solvers for the network parameters.
//!
//! These only ever see the network weights. Pruning parameters have their
//! own solver in [`crate::rho`].

use serde::{Deserialize, Serialize};

use crate::error::{mismatch, Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SolverKind {
    Sgd {
        lr: Real,
        #[serde(default)]
        momentum: Real,
    },
    Adam {
        lr: Real,
        #[serde(default = "default_beta1")]
        beta1: Real,
        #[serde(default = "default_beta2")]
        beta2: Real,
        #[serde(default = "default_adam_eps")]
        eps: Real,
    },
}

fn default_beta1() -> Real {
    0.9
}
fn default_beta2() -> Real {
    0.999
}
fn default_adam_eps() -> Real {
    1e-8
}

impl Default for SolverKind {
    fn default() -> Self {
        SolverKind::Adam {
            lr: 1e-3,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_adam_eps(),
        }
    }
}

impl SolverKind {
    pub fn lr(&self) -> Real {
        match self {
            SolverKind::Sgd { lr, .. } | SolverKind::Adam { lr, .. } => *lr,
        }
    }

    pub fn with_lr(self, new: Real) -> Self {
        match self {
            SolverKind::Sgd { momentum, .. } => SolverKind::Sgd { lr: new, momentum },
            SolverKind::Adam { beta1, beta2, eps, .. } => SolverKind::Adam {
                lr: new,
                beta1,
                beta2,
                eps,
            },
        }
    }
}

/// Solver state: first/second moments per parameter and the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightSolver {
    pub kind: SolverKind,
    pub first: Vec<Tensor>,
    pub second: Vec<Tensor>,
    pub steps: u64,
}

impl WeightSolver {
    pub fn new(kind: SolverKind, params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect::<Vec<_>>();
        let second = match kind {
            SolverKind::Adam { .. } => zeros(),
            SolverKind::Sgd { .. } => Vec::new(),
        };
        Self {
            kind,
            first: zeros(),
            second,
            steps: 0,
        }
    }

    pub fn set_lr(&mut self, lr: Real) {
        self.kind = self.kind.with_lr(lr);
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.first.len() {
            return Err(mismatch("weight solver", "parameter count", self.first.len(), grads.len()));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.first[i].shape() {
                return Err(Error::BadShape {
                    op: "weight solver",
                    shape: g.shape().to_vec(),
                    reason: format!("gradient {i} does not match parameter {:?}", p.shape()),
                });
            }
        }
        self.steps += 1;
        match self.kind {
            SolverKind::Sgd { lr, momentum } => {
                for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.first) {
                    for ((w, d), m) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                        *m = momentum * *m + d;
                        *w -= lr * *m;
                    }
                }
            }
            SolverKind::Adam { lr, beta1, beta2, eps } => {
                let t = self.steps as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.first).zip(&mut self.second) {
                    let iter = p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut())
                        .zip(v.data_mut());
                    for (((w, d), m), v) in iter {
                        *m = beta1 * *m + (1.0 - beta1) * d;
                        *v = beta2 * *v + (1.0 - beta2) * d * d;
                        *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}
