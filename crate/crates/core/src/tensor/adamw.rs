//! AdamW with decoupled weight decay.

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// Optimizer state: one first/second moment buffer per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    decay: Vec<bool>,
}

impl AdamW {
    /// `decay[i]` selects whether parameter `i` receives weight decay.
    pub fn new(config: AdamWConfig, params: &[Tensor], decay: Vec<bool>) -> Result<Self> {
        if decay.len() != params.len() {
            return Err(Error::Shape(format!(
                "{} decay flags for {} parameters",
                decay.len(),
                params.len()
            )));
        }
        Ok(Self {
            config,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            decay,
        })
    }

    /// Rebuilds state from saved moments (checkpoint resume).
    pub fn from_parts(
        config: AdamWConfig,
        step: u64,
        m: Vec<Vec<f64>>,
        v: Vec<Vec<f64>>,
        decay: Vec<bool>,
    ) -> Result<Self> {
        if m.len() != v.len() || m.len() != decay.len() {
            return Err(Error::Shape("inconsistent AdamW state lengths".into()));
        }
        if m.iter().zip(&v).any(|(a, b)| a.len() != b.len()) {
            return Err(Error::Shape("AdamW moment buffers differ in length".into()));
        }
        Ok(Self {
            config,
            step,
            m,
            v,
            decay,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Vec<f64>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<f64>] {
        &self.v
    }

    pub fn decay_flags(&self) -> &[bool] {
        &self.decay
    }

    /// One update over all parameters. Every parameter must carry a gradient.
    pub fn step(&mut self, params: &mut [Tensor]) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} parameters, got {}",
                self.m.len(),
                params.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            if p.grad().is_none() {
                return Err(Error::Contract(format!("parameter {i} has no gradient")));
            }
            if p.numel() != self.m[i].len() {
                return Err(Error::Shape(format!(
                    "parameter {i} has {} values, moments have {}",
                    p.numel(),
                    self.m[i].len()
                )));
            }
        }
        self.step += 1;
        let AdamWConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let grad = p.grad().expect("checked above").to_vec();
            let shrink = if self.decay[i] {
                1.0 - lr * weight_decay
            } else {
                1.0
            };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let g = grad[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *w = *w * shrink - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(v: f64, g: f64) -> Tensor {
        let mut t = Tensor::scalar(v).with_requires_grad(true);
        t.set_grad(vec![g]).unwrap();
        t
    }

    #[test]
    fn zero_grad_no_decay_is_fixed_point() {
        let mut ps = vec![param(1.5, 0.0)];
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &ps, vec![true]).unwrap();
        opt.step(&mut ps).unwrap();
        assert_eq!(ps[0].data(), &[1.5]);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // t = 1: mhat = g, vhat = g², update = lr·g/(|g| + eps).
        let mut ps = vec![param(0.0, 1.0)];
        let cfg = AdamWConfig {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        };
        let mut opt = AdamW::new(cfg, &ps, vec![true]).unwrap();
        opt.step(&mut ps).unwrap();
        let expected = -0.1 * 1.0 / (1.0 + 1e-8);
        assert!((ps[0].data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn decoupled_decay_shrinks_by_factor() {
        let mut ps = vec![param(2.0, 0.0)];
        let cfg = AdamWConfig {
            lr: 0.01,
            weight_decay: 0.5,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg, &ps, vec![true]).unwrap();
        opt.step(&mut ps).unwrap();
        assert!((ps[0].data()[0] - 2.0 * (1.0 - 0.01 * 0.5)).abs() < 1e-15);
    }

    #[test]
    fn missing_grad_is_contract_error() {
        let mut ps = vec![Tensor::scalar(1.0)];
        let mut opt = AdamW::new(AdamWConfig::default(), &ps, vec![true]).unwrap();
        assert!(matches!(opt.step(&mut ps), Err(Error::Contract(_))));
        assert_eq!(opt.step_count(), 0);
    }

    #[test]
    fn step_counter_increments() {
        let mut ps = vec![param(1.0, 0.3)];
        let mut opt = AdamW::new(AdamWConfig::default(), &ps, vec![false]).unwrap();
        for k in 1..=5 {
            opt.step(&mut ps).unwrap();
            assert_eq!(opt.step_count(), k);
        }
    }
}
