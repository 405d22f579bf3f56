use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Cosine annealing from `lr_max` at step 0 to `lr_min` at `total_steps`:
/// `lr_min + ½(lr_max − lr_min)(1 + cos(π·step/total))`.
///
/// Evaluated as the convex combination `w·lr_max + (1 − w)·lr_min` with
/// `w = ½(1 + cos(π·step/total))`, which hits both endpoints and the midpoint
/// `(lr_max + lr_min)/2` exactly in floating point.
pub fn cosine_lr(step: usize, total_steps: usize, lr_max: f64, lr_min: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Config("cosine schedule needs total_steps > 0".into()));
    }
    if step > total_steps {
        return Err(Error::InvalidInput(format!(
            "step {step} beyond schedule length {total_steps}"
        )));
    }
    let w = 0.5 * (1.0 + (PI * step as f64 / total_steps as f64).cos());
    Ok(w * lr_max + (1.0 - w) * lr_min)
}

/// Learning-rate schedule shared by every parameter group.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LrSchedule {
    /// Cosine annealing to `min_ratio · peak`.
    Cosine { min_ratio: f64 },
    Constant,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule::Cosine { min_ratio: 0.0 }
    }
}

impl LrSchedule {
    /// Rate applied at `step` for a group whose peak rate is `peak`.
    pub fn rate(&self, peak: f64, step: usize, total_steps: usize) -> Result<f64> {
        match *self {
            LrSchedule::Cosine { min_ratio } => {
                cosine_lr(step, total_steps, peak, peak * min_ratio)
            }
            LrSchedule::Constant => Ok(peak),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LrSchedule::Cosine { .. } => "cosine",
            LrSchedule::Constant => "constant",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(LrSchedule::default()),
            "constant" => Ok(LrSchedule::Constant),
            other => Err(Error::Config(format!("unknown schedule '{other}'"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_midpoint() {
        let (hi, lo) = (3e-3, 1e-4);
        assert_eq!(cosine_lr(0, 10, hi, lo).unwrap(), hi);
        assert_eq!(cosine_lr(10, 10, hi, lo).unwrap(), lo);
        assert_eq!(cosine_lr(5, 10, hi, lo).unwrap(), (hi + lo) / 2.0);
    }

    #[test]
    fn monotone_decreasing() {
        let rates: Vec<f64> = (0..=50).map(|s| cosine_lr(s, 50, 1.0, 0.0).unwrap()).collect();
        assert!(rates.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn zero_total_is_an_error() {
        assert!(cosine_lr(0, 0, 1.0, 0.0).is_err());
        assert!(cosine_lr(11, 10, 1.0, 0.0).is_err());
    }
}
