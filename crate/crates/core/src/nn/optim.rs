use std::f64::consts::PI;

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// AdamW with decoupled weight decay and bias-corrected moments.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Default for AdamW {
    fn default() -> Self {
        Self::new(0.001, 0.01)
    }
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update over `params`, which must be passed in the same order on
    /// every call.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Tensor>) -> Result<()> {
        let params: Vec<&mut Tensor> = params.into_iter().collect();
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::Usage(format!(
                "optimizer tracks {} parameters, got {}",
                self.m.len(),
                params.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            if p.grad().is_none() {
                return Err(Error::Usage(format!("parameter {i} has no gradient")));
            }
            if self.m[i].len() != p.numel() {
                return shape_err("adamw moments", &[self.m[i].len()], p.shape());
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let decay = 1.0 - self.lr * self.weight_decay;
        for ((p, m), v) in params.into_iter().zip(&mut self.m).zip(&mut self.v) {
            let grad = p.grad().expect("checked above").to_vec();
            for (((w, g), m), v) in p.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *w *= decay;
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// `base_lr * 0.5 * (1 + cos(pi * step / total_steps))`, clamped at the
/// final value for steps past the end.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    let s = step.min(total_steps) as f64;
    base_lr * 0.5 * (1.0 + (PI * s / total_steps as f64).cos())
}
