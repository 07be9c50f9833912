//! Learning-rate schedule and Adam.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Result};
use crate::tensor::{Scalar, Tensor};

/// Linear warmup from `floor` to `peak`, then cosine decay back to `floor`
/// at `total` steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub peak: f64,
    pub floor: f64,
    pub warmup: usize,
    pub total: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            peak: 1e-3,
            floor: 1e-7,
            warmup: 10_000,
            total: 100_000,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.peak > 0.0) || self.floor < 0.0 || self.floor > self.peak {
            return config_err("learning rates need 0 <= floor <= peak and peak > 0");
        }
        if self.warmup >= self.total {
            return config_err(format!(
                "warmup ({}) must be shorter than total steps ({})",
                self.warmup, self.total
            ));
        }
        Ok(())
    }

    /// Steps past `total` stay at the floor.
    pub fn lr(&self, step: usize) -> f64 {
        let span = self.peak - self.floor;
        if step < self.warmup {
            return self.floor + span * step as f64 / self.warmup as f64;
        }
        let t = ((step - self.warmup) as f64 / (self.total - self.warmup) as f64).min(1.0);
        self.floor + span * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

pub fn lr_schedule(step: usize, schedule: &Schedule) -> f64 {
    schedule.lr(step)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Updates applied so far.
    pub t: u64,
    /// Updates skipped because a gradient was not finite.
    pub skipped: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(params: &[&Tensor<T>], beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps,
            t: 0,
            skipped: 0,
            m: params.iter().map(|p| Tensor::zeros_like(p)).collect(),
            v: params.iter().map(|p| Tensor::zeros_like(p)).collect(),
        }
    }

    /// One bias-corrected update. Returns false, leaving parameters and
    /// moments untouched, when any gradient entry is not finite.
    pub fn step(&mut self, params: Vec<&mut Tensor<T>>, grads: &[&Tensor<T>], lr: f64) -> Result<bool> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return shape_err("optimizer state does not match parameter list");
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return shape_err(format!("parameter {:?} vs gradient {:?}", p.shape(), g.shape()));
            }
        }
        if !grads.iter().all(|g| g.all_finite()) {
            self.skipped += 1;
            return Ok(false);
        }
        self.t += 1;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(self.t as i32));
        let c2 = T::lit(1.0 - self.beta2.powi(self.t as i32));
        let lr = T::lit(lr);
        let eps = T::lit(self.eps);
        let one = T::one();
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((w, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let mh = *m / c1;
                let vh = *v / c2;
                *w -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let s = Schedule::default();
        assert_eq!(s.lr(0), 1e-7);
        assert_eq!(s.lr(s.warmup), 1e-3);
        assert!((s.lr(s.total) - 1e-7).abs() < 1e-18);
        assert!((s.lr(s.warmup / 2) - (1e-7 + (1e-3 - 1e-7) / 2.0)).abs() < 1e-15);
        let mid = s.lr((s.warmup + s.total) / 2);
        assert!((mid - (1e-3 + 1e-7) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn schedule_validation() {
        assert!(Schedule { warmup: 10, total: 10, ..Schedule::default() }.validate().is_err());
        assert!(Schedule { peak: 0.0, ..Schedule::default() }.validate().is_err());
        assert!(Schedule::default().validate().is_ok());
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::<f64>::from_vec(&[2], vec![1.0, -2.0]).unwrap();
        let g = Tensor::<f64>::zeros(&[2]);
        let mut adam = Adam::new(&[&p], 0.9, 0.999, 1e-8);
        assert!(adam.step(vec![&mut p], &[&g], 1e-3).unwrap());
        assert_eq!(p.data(), &[1.0, -2.0]);
        assert_eq!(adam.t, 1);
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        let mut p = Tensor::<f64>::from_vec(&[2], vec![0.0, 0.0]).unwrap();
        let g = Tensor::<f64>::from_vec(&[2], vec![0.5, -3.0]).unwrap();
        let mut adam = Adam::new(&[&p], 0.9, 0.999, 1e-8);
        adam.step(vec![&mut p], &[&g], 1e-3).unwrap();
        assert!((p.data()[0] + 1e-3 * 0.5 / (0.5 + 1e-8)).abs() < 1e-15);
        assert!((p.data()[1] - 1e-3 * 3.0 / (3.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_is_skipped() {
        let mut p = Tensor::<f32>::from_vec(&[1], vec![1.0]).unwrap();
        let g = Tensor::<f32>::from_vec(&[1], vec![f32::NAN]).unwrap();
        let mut adam = Adam::new(&[&p], 0.9, 0.999, 1e-8);
        assert!(!adam.step(vec![&mut p], &[&g], 1e-3).unwrap());
        assert_eq!(p.data(), &[1.0]);
        assert_eq!((adam.t, adam.skipped), (0, 1));
    }
}
