//! Plain SGD and the step-annealed learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `θ ← θ − lr·∇θ`, then zero the gradient.
pub fn sgd_step<'a>(params: impl IntoIterator<Item = &'a mut Tensor>, lr: f64) -> Result<()> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::Argument(format!("learning rate {lr} must be finite and >= 0")));
    }
    for p in params {
        let grad = p
            .grad()
            .ok_or_else(|| Error::Argument("sgd_step: parameter does not require grad".into()))?
            .to_vec();
        if lr != 0.0 {
            for (v, g) in p.data_mut().iter_mut().zip(&grad) {
                *v -= lr * g;
            }
        }
        p.zero_grad();
    }
    Ok(())
}

/// Learning rate held at `initial` and divided by ten from `anneal_epoch` on
/// (epochs are 1-based).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub epochs: usize,
    pub initial_lr: f64,
    pub anneal_epoch: usize,
}

impl StepSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.initial_lr
            )));
        }
        if self.anneal_epoch == 0 || (self.epochs > 0 && self.anneal_epoch >= self.epochs) {
            return Err(Error::Config(format!(
                "anneal epoch {} must lie in 1..{}",
                self.anneal_epoch, self.epochs
            )));
        }
        Ok(())
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        if epoch >= self.anneal_epoch {
            self.initial_lr / 10.0
        } else {
            self.initial_lr
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_lr_leaves_params_bit_identical() {
        let mut p = Tensor::vector(vec![0.1, -7.25, 3.0]).unwrap().with_grad();
        p.accumulate_grad(&[1.0, 2.0, 3.0]).unwrap();
        let before = p.clone();
        sgd_step([&mut p], 0.0).unwrap();
        assert!(p.bit_eq(&before));
        assert_eq!(p.grad().unwrap(), &[0.0; 3]);
    }

    #[test]
    fn one_step_arithmetic() {
        let mut p = Tensor::vector(vec![1.0, 2.0]).unwrap().with_grad();
        p.accumulate_grad(&[0.5, -1.0]).unwrap();
        sgd_step([&mut p], 0.1).unwrap();
        assert!((p.data()[0] - 0.95).abs() < 1e-15);
        assert!((p.data()[1] - 2.1).abs() < 1e-15);
    }

    #[test]
    fn rejects_params_without_grad() {
        let mut p = Tensor::vector(vec![1.0]).unwrap();
        assert!(sgd_step([&mut p], 0.1).is_err());
    }

    #[test]
    fn annealing_schedules() {
        let s1 = StepSchedule { epochs: 20, initial_lr: 0.01, anneal_epoch: 10 };
        for e in 1..=9 {
            assert_eq!(s1.lr(e), 0.01);
        }
        for e in 10..=20 {
            assert_eq!(s1.lr(e), 0.001);
        }
        let s2 = StepSchedule { epochs: 30, initial_lr: 0.001, anneal_epoch: 20 };
        for e in 1..=19 {
            assert_eq!(s2.lr(e), 0.001);
        }
        for e in 20..=30 {
            assert_eq!(s2.lr(e), 0.0001);
        }
        assert!(s1.validate().is_ok());
        assert!(StepSchedule { epochs: 10, initial_lr: 0.01, anneal_epoch: 10 }.validate().is_err());
        assert!(StepSchedule { epochs: 10, initial_lr: 0.0, anneal_epoch: 5 }.validate().is_err());
    }
}
