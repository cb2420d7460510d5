//! First-order optimizers over parameter lists.

use serde::{Deserialize, Serialize};

use super::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OptimizerKind {
    SgdMomentum { momentum: f64 },
    /// Decoupled weight decay is applied to the weights before the moment update.
    Adamw { beta1: f64, beta2: f64, eps: f64, weight_decay: f64 },
}

impl OptimizerKind {
    pub fn sgd(momentum: f64) -> Self {
        OptimizerKind::SgdMomentum { momentum }
    }

    /// AdamW with ε = 1e-8 and weight decay 0.01.
    pub fn adamw(beta1: f64, beta2: f64) -> Self {
        OptimizerKind::Adamw { beta1, beta2, eps: 1e-8, weight_decay: 0.01 }
    }
}

#[derive(Clone, Debug)]
enum Slot {
    Velocity(Vec<f64>),
    Moments { m: Vec<f64>, v: Vec<f64> },
}

/// Optimizer state: one buffer set per parameter position.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    slots: Vec<Option<Slot>>,
    steps: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        Optimizer { kind, slots: Vec::new(), steps: 0 }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn step_count(&self) -> u64 {
        self.steps
    }

    /// Updates every parameter that holds a gradient. The parameter list
    /// must be passed in the same order on every call.
    pub fn step<R: Real>(&mut self, params: Vec<&mut Tensor<R>>, lr: f64) -> Result<()> {
        if self.slots.len() < params.len() {
            self.slots.resize(params.len(), None);
        }
        self.steps += 1;
        let t = self.steps as i32;
        for (slot, p) in self.slots.iter_mut().zip(params) {
            let Some(grad) = p.grad().map(|g| g.iter().map(|v| v.to_f64_lossy()).collect::<Vec<_>>()) else {
                continue;
            };
            let n = p.numel();
            match self.kind {
                OptimizerKind::SgdMomentum { momentum } => {
                    let Slot::Velocity(vel) = slot.get_or_insert_with(|| Slot::Velocity(vec![0.0; n])) else {
                        unreachable!("slot kind fixed by optimizer kind")
                    };
                    if vel.len() != n {
                        return Err(Error::shape(format!("optimizer buffer {} vs parameter {n}", vel.len())));
                    }
                    for ((w, v), g) in p.data_mut().iter_mut().zip(vel.iter_mut()).zip(&grad) {
                        *v = momentum * *v + g;
                        *w = R::from_f64_lossy(w.to_f64_lossy() - lr * *v);
                    }
                }
                OptimizerKind::Adamw { beta1, beta2, eps, weight_decay } => {
                    let Slot::Moments { m, v } =
                        slot.get_or_insert_with(|| Slot::Moments { m: vec![0.0; n], v: vec![0.0; n] })
                    else {
                        unreachable!("slot kind fixed by optimizer kind")
                    };
                    if m.len() != n {
                        return Err(Error::shape(format!("optimizer buffer {} vs parameter {n}", m.len())));
                    }
                    let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
                    for (((w, m), v), g) in p.data_mut().iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(&grad) {
                        let mut wf = w.to_f64_lossy() * (1.0 - lr * weight_decay);
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        wf -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                        *w = R::from_f64_lossy(wf);
                    }
                }
            }
        }
        Ok(())
    }
}
