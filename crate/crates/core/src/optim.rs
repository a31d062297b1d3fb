//! Adam and the step learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adaptive moment estimation over an ordered list of parameter tensors.
///
/// Moment buffers are allocated lazily on the first step and are keyed by
/// position, so callers must always pass parameters in the same order.
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
    steps: u64,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            first: Vec::new(),
            second: Vec::new(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, params: Vec<&mut Matrix>, grads: &[Matrix], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Argument(format!(
                "optimizer got {} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.first.is_empty() {
            self.first = grads.iter().map(|g| Matrix::zeros(g.raw_dim())).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != params.len() {
            return Err(Error::Argument("parameter list changed between steps".into()));
        }
        self.steps += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bias1 = 1.0 - beta1.powi(self.steps as i32);
        let bias2 = 1.0 - beta2.powi(self.steps as i32);
        for (((param, grad), m), v) in params
            .into_iter()
            .zip(grads)
            .zip(self.first.iter_mut())
            .zip(self.second.iter_mut())
        {
            if param.raw_dim() != grad.raw_dim() || m.raw_dim() != grad.raw_dim() {
                return Err(Error::Argument(format!(
                    "gradient shape {:?} does not match parameter shape {:?}",
                    grad.shape(),
                    param.shape()
                )));
            }
            ndarray::Zip::from(param)
                .and(grad)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let m_hat = *m / bias1;
                    let v_hat = *v / bias2;
                    *p -= lr * m_hat / (v_hat.sqrt() + eps);
                });
        }
        Ok(())
    }
}

/// Multiplies the base rate by `factor` once per milestone passed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub base_lr: f64,
    pub factor: f64,
    /// Milestones as fractions of the total epoch count.
    pub milestones: Vec<f64>,
}

impl StepSchedule {
    pub fn lr_at(&self, epoch: usize, total_epochs: usize) -> f64 {
        let passed = self
            .milestones
            .iter()
            .filter(|&&frac| epoch >= (frac * total_epochs as f64).round() as usize)
            .count();
        self.base_lr * self.factor.powi(passed as i32)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn first_adam_step_moves_by_lr_in_sign_direction() {
        let mut p = array![[1.0, -2.0]];
        let g = array![[0.5, -3.0]];
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(vec![&mut p], &[g], 0.1).unwrap();
        assert!((p[[0, 0]] - 0.9).abs() < 1e-6);
        assert!((p[[0, 1]] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = array![[5.0]];
        let mut adam = Adam::new(AdamConfig::default());
        for _ in 0..2000 {
            let g = p.mapv(|x| 2.0 * x);
            adam.step(vec![&mut p], &[g], 0.05).unwrap();
        }
        assert!(p[[0, 0]].abs() < 1e-2);
    }

    #[test]
    fn schedule_decays_at_half_and_seventy_percent() {
        let s = StepSchedule {
            base_lr: 3.5e-4,
            factor: 0.1,
            milestones: vec![0.5, 0.7],
        };
        assert_eq!(s.lr_at(0, 50), 3.5e-4);
        assert_eq!(s.lr_at(24, 50), 3.5e-4);
        assert!((s.lr_at(25, 50) - 3.5e-5).abs() < 1e-18);
        assert!((s.lr_at(35, 50) - 3.5e-6).abs() < 1e-18);
        assert!((s.lr_at(5, 10) - 3.5e-5).abs() < 1e-18);
        assert!((s.lr_at(7, 10) - 3.5e-6).abs() < 1e-18);
    }

    #[test]
    fn mismatched_gradient_count_is_rejected() {
        let mut p = array![[1.0]];
        let mut adam = Adam::new(AdamConfig::default());
        assert!(adam.step(vec![&mut p], &[], 0.1).is_err());
    }
}
