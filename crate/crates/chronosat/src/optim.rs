//! Learning-rate schedules. The optimizer itself lives on
//! [`crate::params::ParamStore::adamw_step`]; training loops combine the two.

use std::f64::consts::PI;

/// Cosine annealing from `lr_init` down to `lr_min` over `total` steps;
/// steps beyond `total` clamp to `lr_min`.
pub fn cosine_lr(step: u64, total: u64, lr_init: f64, lr_min: f64) -> f64 {
    assert!(total > 0, "cosine schedule needs total > 0");
    let s = step.min(total) as f64;
    lr_min + 0.5 * (lr_init - lr_min) * (1.0 + (PI * s / total as f64).cos())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrSchedule {
    Constant(f64),
    Cosine { total: u64, lr_init: f64, lr_min: f64 },
}

impl LrSchedule {
    pub fn at(&self, step: u64) -> f64 {
        match *self {
            LrSchedule::Constant(lr) => lr,
            LrSchedule::Cosine { total, lr_init, lr_min } => cosine_lr(step, total, lr_init, lr_min),
        }
    }
}
