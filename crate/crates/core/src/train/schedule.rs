use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cosine annealing with warm restarts. Cycle `i` lasts `period · mult^i` epochs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CosineWarmRestarts {
    pub lr_max: f64,
    pub lr_min: f64,
    pub period: f64,
    pub mult: f64,
}

impl CosineWarmRestarts {
    pub fn new(lr_max: f64, lr_min: f64, period: f64, mult: f64) -> Result<Self> {
        if !(lr_min <= lr_max) || lr_min < 0.0 {
            return Err(Error::Config(format!("need 0 <= lr_min <= lr_max, got {lr_min} and {lr_max}")));
        }
        if !(period > 0.0) || !(mult >= 1.0) {
            return Err(Error::Config(format!("restart period {period} must be positive and mult {mult} at least 1")));
        }
        Ok(CosineWarmRestarts {
            lr_max,
            lr_min,
            period,
            mult,
        })
    }

    /// Rate at position `t_cur` of a cycle of length `t_i`.
    pub fn within_cycle(&self, t_cur: f64, t_i: f64) -> f64 {
        self.lr_min + 0.5 * (self.lr_max - self.lr_min) * (1.0 + (std::f64::consts::PI * t_cur / t_i).cos())
    }

    /// `(t_cur, t_i)` for a (fractional) epoch count.
    pub fn cycle(&self, epoch: f64) -> (f64, f64) {
        let mut t = epoch.max(0.0);
        let mut len = self.period;
        while t >= len {
            t -= len;
            len *= self.mult;
        }
        (t, len)
    }

    pub fn lr(&self, epoch: f64) -> f64 {
        let (t_cur, t_i) = self.cycle(epoch);
        self.within_cycle(t_cur, t_i)
    }
}
