use serde::{Deserialize, Serialize};

use crate::element::{c, Element};
use crate::error::{arg_err, Result, TensorError};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 2e-4, beta1: 0.5, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Adam with bias-corrected moments. One instance per parameter list; the
/// list must be passed in the same order on every step.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T: Element = f32> {
    pub config: AdamConfig,
    pub step: u64,
    pub first_moment: Vec<Vec<T>>,
    pub second_moment: Vec<Vec<T>>,
}

impl<T: Element> AdamState<T> {
    pub fn new(config: AdamConfig, params: &[Tensor<T>]) -> Self {
        let zeros = || params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
        Self { config, step: 0, first_moment: zeros(), second_moment: zeros() }
    }

    /// Applies one update from the parameters' current grads. Grads are left
    /// in place for the caller to clear.
    pub fn step(&mut self, params: &[Tensor<T>]) -> Result<()> {
        if params.len() != self.first_moment.len() {
            return arg_err(
                "adam_step",
                format!("state tracks {} parameters, got {}", self.first_moment.len(), params.len()),
            );
        }
        for (i, p) in params.iter().enumerate() {
            if p.grad_ref().is_none() {
                return Err(TensorError::MissingGrad { index: i });
            }
            if self.first_moment[i].len() != p.numel() {
                return arg_err(
                    "adam_step",
                    format!(
                        "moment length {} does not match parameter {i} of {} elements",
                        self.first_moment[i].len(),
                        p.numel()
                    ),
                );
            }
        }

        self.step += 1;
        let cfg = self.config;
        let (b1, b2) = (c::<T>(cfg.beta1), c::<T>(cfg.beta2));
        let t = self.step as i32;
        let bc1 = c::<T>(1.0 - cfg.beta1.powi(t));
        let bc2 = c::<T>(1.0 - cfg.beta2.powi(t));
        let (lr, eps) = (c::<T>(cfg.lr), c::<T>(cfg.epsilon));
        let one = T::one();

        for (i, p) in params.iter().enumerate() {
            let grad = p.grad_ref();
            let grad = grad.as_ref().expect("checked above");
            let mut data = p.data_mut();
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            for j in 0..data.len() {
                let g = grad[j];
                m[j] = b1 * m[j] + (one - b1) * g;
                v[j] = b2 * v[j] + (one - b2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                data[j] = data[j] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

pub fn zero_grads<T: Element>(params: &[Tensor<T>]) {
    for p in params {
        p.zero_grad();
    }
}
