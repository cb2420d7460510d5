//! Learning-rate schedules indexed by optimizer step.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LrSchedule {
    /// `base · gamma^(number of milestones ≤ step)`.
    Multistep { base_lr: f64, milestones: Vec<usize>, gamma: f64 },
    /// Cosine annealing from `base_lr` to `min_lr`, restarting after
    /// periods of `t0`, `t0·t_mult`, `t0·t_mult²`, ... steps.
    CosineWarmRestarts { base_lr: f64, t0: usize, t_mult: usize, min_lr: f64 },
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            LrSchedule::Multistep { base_lr, gamma, .. } => *base_lr > 0.0 && *gamma > 0.0,
            LrSchedule::CosineWarmRestarts { base_lr, t0, t_mult, min_lr } => {
                *base_lr > 0.0 && *min_lr > 0.0 && *t0 >= 1 && *t_mult >= 1
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid learning-rate schedule {self:?}")))
        }
    }

    /// Milestones placed at fractions of a total budget, e.g. `150/240`.
    pub fn multistep_fractions(base_lr: f64, total: usize, fractions: &[f64], gamma: f64) -> Self {
        let milestones = fractions.iter().map(|f| (f * total as f64).round() as usize).collect();
        LrSchedule::Multistep { base_lr, milestones, gamma }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        match self {
            LrSchedule::Multistep { base_lr, milestones, gamma } => {
                let passed = milestones.iter().filter(|&&m| m <= step).count();
                base_lr * gamma.powi(passed as i32)
            }
            LrSchedule::CosineWarmRestarts { base_lr, t0, t_mult, min_lr } => {
                let (t_cur, t_i) = cosine_position(step, *t0, *t_mult);
                min_lr + (base_lr - min_lr) * (1.0 + (PI * t_cur as f64 / t_i as f64).cos()) / 2.0
            }
        }
    }
}

/// Position within the current restart period and that period's length.
fn cosine_position(step: usize, t0: usize, t_mult: usize) -> (usize, usize) {
    let (mut start, mut len) = (0usize, t0);
    while step >= start + len {
        start += len;
        len = len.saturating_mul(t_mult);
    }
    (step - start, len)
}
