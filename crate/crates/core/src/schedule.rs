//! Linear warmup followed by validation-driven decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Learning-rate schedule parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub decay_factor: f64,
    /// Consecutive non-improving validations that trigger one decay.
    pub patience: usize,
    pub min_lr: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            base_lr: 3e-4,
            warmup_steps: 200,
            decay_factor: 0.5,
            patience: 3,
            min_lr: 1e-5,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if !(self.min_lr > 0.0 && self.min_lr < self.base_lr) {
            return Err(Error::Config(format!(
                "min_lr must lie in (0, base_lr), got {} with base_lr {}",
                self.min_lr, self.base_lr
            )));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor < 1.0) {
            return Err(Error::Config(format!("decay_factor must lie in (0, 1), got {}", self.decay_factor)));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        Ok(())
    }

    /// Post-warmup rate after `k` decay events, floored at `min_lr`.
    pub fn decayed(&self, k: usize) -> f64 {
        (self.base_lr * self.decay_factor.powi(k as i32)).max(self.min_lr)
    }

    /// Rate for 1-based `step` given the dev scores seen so far.
    pub fn lr_at(&self, step: usize, dev_history: &[f64]) -> f64 {
        if step < self.warmup_steps {
            return self.base_lr * step as f64 / self.warmup_steps as f64;
        }
        self.decayed(decay_events(dev_history, self.patience))
    }

    /// True once decay has driven the rate down to `min_lr`.
    pub fn exhausted(&self, dev_history: &[f64]) -> bool {
        self.base_lr * self.decay_factor.powi(decay_events(dev_history, self.patience) as i32) <= self.min_lr
    }
}

/// Number of decays: each run of `patience` consecutive validations without
/// a new best counts once, then the counter restarts.
pub fn decay_events(history: &[f64], patience: usize) -> usize {
    let mut best = f64::NEG_INFINITY;
    let (mut stale, mut k) = (0, 0);
    for &score in history {
        if score > best {
            best = score;
            stale = 0;
        } else {
            stale += 1;
            if stale == patience {
                k += 1;
                stale = 0;
            }
        }
    }
    k
}

/// Free-function form of [`Schedule::lr_at`].
pub fn lr_at(step: usize, dev_history: &[f64], schedule: &Schedule) -> f64 {
    schedule.lr_at(step, dev_history)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn long_warmup() -> Schedule {
        Schedule {
            warmup_steps: 8000,
            ..Schedule::default()
        }
    }

    #[test]
    fn warmup_is_linear_and_continuous() {
        let s = long_warmup();
        assert!((s.lr_at(4000, &[]) - 1.5e-4).abs() < 1e-18);
        assert_eq!(s.lr_at(8000, &[]), 3e-4);
        assert_eq!(s.lr_at(20000, &[]), 3e-4);
    }

    #[test]
    fn decays_after_patience() {
        let s = long_warmup();
        let two = [10.0, 9.0, 9.0, 9.0, 8.0, 8.0, 8.0];
        assert_eq!(decay_events(&two, 3), 2);
        assert!((s.lr_at(9000, &two) - 7.5e-5).abs() < 1e-18);
        assert_eq!(decay_events(&[1.0, 2.0, 3.0, 2.0, 4.0], 3), 0);
    }

    #[test]
    fn floors_at_min_lr() {
        let s = long_warmup();
        let flat = vec![1.0; 40];
        assert_eq!(s.lr_at(9000, &flat), 1e-5);
        assert!(s.exhausted(&flat));
        assert!(!s.exhausted(&[1.0]));
    }

    #[test]
    fn zero_warmup() {
        let s = Schedule { warmup_steps: 0, ..Schedule::default() };
        assert_eq!(s.lr_at(1, &[]), 3e-4);
    }

    #[test]
    fn validation() {
        assert!(Schedule::default().validate().is_ok());
        assert!(Schedule { min_lr: 1.0, ..Schedule::default() }.validate().is_err());
        assert!(Schedule { decay_factor: 1.0, ..Schedule::default() }.validate().is_err());
    }
}
