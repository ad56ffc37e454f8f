//! Adam with decoupled weight decay, and a cosine learning-rate schedule.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: usize,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.numel()]).collect();
        Self {
            config,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    /// Updates taken so far.
    pub fn step_count(&self) -> usize {
        self.step
    }

    /// One update at learning rate `lr`. Nothing is modified when any
    /// gradient is non-finite.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::Domain(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.numel() != self.m[i].len() {
                return Err(Error::Domain(format!(
                    "tensor {i}: param {:?}, grad {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
        }
        if grads.iter().any(|g| g.data().iter().any(|x| !x.is_finite())) {
            return Err(Error::Divergence {
                step: self.step,
                reason: "non-finite gradient".into(),
            });
        }
        self.step += 1;
        let AdamConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let data = p.data_mut();
            for j in 0..data.len() {
                let gj = g.data()[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let update = (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                data[j] -= lr * (update + weight_decay * data[j]);
            }
            if data.iter().any(|x| !x.is_finite()) {
                return Err(Error::Divergence {
                    step: self.step,
                    reason: "non-finite parameter after update".into(),
                });
            }
        }
        Ok(())
    }
}

/// `base · ½(1 + cos(π·step/total))`, reaching 0 at `total`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let t = (step.min(total) as f64) / total as f64;
    base * 0.5 * (1.0 + (PI * t).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_no_decay_is_identity() {
        let mut p = vec![Tensor::new(vec![2], vec![1.5, -2.0]).unwrap()];
        let before = p.clone();
        let mut s = AdamState::new(
            AdamConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
            &p,
        );
        s.step(&mut p, &[Tensor::zeros(&[2])], 0.1).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn non_finite_gradient_is_divergence() {
        let mut p = vec![Tensor::zeros(&[1])];
        let mut s = AdamState::new(AdamConfig::default(), &p);
        let bad = Tensor::from_parts(vec![1], vec![f64::NAN]);
        let err = s.step(&mut p, &[bad], 0.1).unwrap_err();
        assert!(err.is_numeric());
        assert_eq!(s.step_count(), 0);
    }

    #[test]
    fn schedule_endpoints() {
        assert_eq!(cosine_lr(6e-4, 0, 100), 6e-4);
        assert!(cosine_lr(6e-4, 100, 100).abs() < 1e-20);
        assert!((cosine_lr(1.0, 50, 100) - 0.5).abs() < 1e-12);
    }
}
