use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Linear warmup from `min_lr` to `init_lr`, then half-cosine decay back to `min_lr`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub init_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn new(init_lr: f64, min_lr: f64, warmup_steps: usize, total_steps: usize) -> Self {
        Self {
            init_lr,
            min_lr,
            warmup_steps,
            total_steps,
        }
    }

    pub fn lr_at_step(&self, step: usize) -> Result<f64> {
        if step > self.total_steps {
            return Err(Error::Input(format!(
                "step {step} outside 0..={}",
                self.total_steps
            )));
        }
        Ok(if step < self.warmup_steps {
            self.warmup_branch(step as f64)
        } else if step == self.warmup_steps {
            self.init_lr
        } else if step == self.total_steps {
            self.min_lr
        } else {
            self.cosine_branch(step as f64)
        })
    }

    /// The warmup formula, defined for any real step.
    pub fn warmup_branch(&self, step: f64) -> f64 {
        self.min_lr + (self.init_lr - self.min_lr) * step / self.warmup_steps as f64
    }

    /// The cosine formula, defined for any real step.
    pub fn cosine_branch(&self, step: f64) -> f64 {
        let span = (self.total_steps - self.warmup_steps) as f64;
        let t = (step - self.warmup_steps as f64) / span;
        self.min_lr + 0.5 * (self.init_lr - self.min_lr) * (1.0 + (PI * t).cos())
    }
}

/// Free-function form of [`LrSchedule::lr_at_step`].
pub fn lr_at_step(step: usize, total_steps: usize, cfg: &crate::config::TrainConfig) -> Result<f64> {
    cfg.schedule(total_steps).lr_at_step(step)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cosine_midpoint_is_mean_of_endpoints() {
        let s = LrSchedule::new(1e-4, 8e-5, 10, 110);
        assert!((s.lr_at_step(60).unwrap() - 9e-5).abs() < 1e-18);
        assert_eq!(s.lr_at_step(0).unwrap(), 8e-5);
        assert!(s.lr_at_step(111).is_err());
    }

    #[test]
    fn zero_warmup_starts_at_peak() {
        let s = LrSchedule::new(1e-4, 8e-5, 0, 7);
        assert_eq!(s.lr_at_step(0).unwrap(), 1e-4);
        assert_eq!(s.lr_at_step(7).unwrap(), 8e-5);
    }

    proptest! {
        #[test]
        fn nonincreasing_after_warmup(total in 2usize..400, frac in 0.0f64..0.5) {
            let warm = crate::config::warmup_steps(frac, total);
            let s = LrSchedule::new(1e-4, 8e-5, warm, total);
            let mut prev = s.lr_at_step(warm).unwrap();
            for t in warm + 1..=total {
                let lr = s.lr_at_step(t).unwrap();
                prop_assert!(lr <= prev);
                prop_assert!(lr >= 8e-5);
                prev = lr;
            }
            for t in 0..warm {
                prop_assert!(s.lr_at_step(t).unwrap() <= s.lr_at_step(t + 1).unwrap());
            }
        }
    }
}
