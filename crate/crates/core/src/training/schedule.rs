use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fraction of total steps spent ramping the learning rate up.
pub const WARMUP_FRACTION: f64 = 0.15;

/// Linear warm-up to `base_lr`, then linear decay to zero at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub base_lr: f64,
    pub total_steps: usize,
    pub warmup_steps: usize,
}

impl Schedule {
    pub fn new(base_lr: f64, total_steps: usize) -> Result<Self> {
        if total_steps < 2 {
            return Err(Error::Config(format!(
                "schedule needs at least 2 steps, got {total_steps}"
            )));
        }
        if !(base_lr > 0.0 && base_lr.is_finite()) {
            return Err(Error::Config(format!("base_lr must be positive, got {base_lr}")));
        }
        let warmup_steps = ((WARMUP_FRACTION * total_steps as f64).round() as usize)
            .clamp(1, total_steps - 1);
        Ok(Schedule {
            base_lr,
            total_steps,
            warmup_steps,
        })
    }

    pub fn lr(&self, step: usize) -> f64 {
        let step = step.min(self.total_steps);
        if step <= self.warmup_steps {
            self.base_lr * step as f64 / self.warmup_steps as f64
        } else {
            let rest = (self.total_steps - self.warmup_steps) as f64;
            self.base_lr * (self.total_steps - step) as f64 / rest
        }
    }
}
