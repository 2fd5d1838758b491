use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// α schedule: linear growth for the first third of training, then a
/// logistic approach to `alpha_end`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaSchedule {
    pub num_epochs: usize,
    pub alpha_start: f64,
    pub alpha_end: f64,
    pub linear_increment: f64,
    pub steepness: f64,
}

impl AlphaSchedule {
    /// Uses the default steepness `10 / (num_epochs − ⌊num_epochs/3⌋)`.
    pub fn new(
        num_epochs: usize,
        alpha_start: f64,
        alpha_end: f64,
        linear_increment: f64,
    ) -> Result<Self> {
        let tail = num_epochs - num_epochs / 3;
        let steepness = if tail == 0 { 10.0 } else { 10.0 / tail as f64 };
        let s = AlphaSchedule {
            num_epochs,
            alpha_start,
            alpha_end,
            linear_increment,
            steepness,
        };
        s.validate()?;
        Ok(s)
    }

    /// Constant α for every epoch.
    pub fn constant(num_epochs: usize, alpha: f64) -> Result<Self> {
        Self::new(num_epochs, alpha, alpha, 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_start >= 0.0
            && self.alpha_end >= self.alpha_start
            && self.alpha_end.is_finite())
        {
            return Err(Error::validation(format!(
                "need 0 ≤ alpha_start ≤ alpha_end, got {} and {}",
                self.alpha_start, self.alpha_end
            )));
        }
        if !(self.linear_increment >= 0.0 && self.linear_increment.is_finite()) {
            return Err(Error::validation(
                "linear_increment must be a non-negative real",
            ));
        }
        if !(self.steepness > 0.0 && self.steepness.is_finite()) {
            return Err(Error::validation("steepness must be positive"));
        }
        Ok(())
    }

    /// Epoch at which the logistic phase takes over.
    pub fn switch_epoch(&self) -> usize {
        self.num_epochs / 3
    }

    fn linear(&self, epoch: usize) -> f64 {
        (self.alpha_start + self.linear_increment * epoch as f64).min(self.alpha_end)
    }

    pub fn alpha_at(&self, epoch: usize) -> Result<f64> {
        if epoch > self.num_epochs {
            return Err(Error::validation(format!(
                "epoch {epoch} outside [0, {}]",
                self.num_epochs
            )));
        }
        let e1 = self.switch_epoch();
        if epoch < e1 || self.num_epochs == 0 {
            return Ok(self.linear(epoch));
        }
        let a1 = self.linear(e1);
        let t = (epoch - e1) as f64;
        let growth = 2.0 / (1.0 + (-self.steepness * t).exp()) - 1.0;
        Ok(a1 + (self.alpha_end - a1) * growth)
    }

    pub fn values(&self) -> Vec<f64> {
        (0..=self.num_epochs)
            .map(|e| self.alpha_at(e).expect("in range"))
            .collect()
    }
}
