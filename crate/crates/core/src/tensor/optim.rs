use alloc::vec;
use alloc::vec::Vec;

use super::params::ParamStore;
use crate::error::{Error, Result};

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction. Moment buffers are created lazily on the
/// first step and matched to the store by position.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        AdamState { config, step: 0, first: Vec::new(), second: Vec::new() }
    }

    pub fn with_lr(lr: f64) -> Self {
        Self::new(AdamConfig { lr, ..AdamConfig::default() })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable parameter and clears the
    /// gradient slots.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        if self.first.is_empty() {
            for (_, _, t) in params.iter() {
                self.first.push(vec![0.0; t.numel()]);
                self.second.push(vec![0.0; t.numel()]);
            }
        }
        if self.first.len() != params.len() {
            return Err(Error::Usage("parameter store changed size under the optimizer".into()));
        }
        for (id, name, t) in params.iter() {
            if t.requires_grad() && t.grad().is_none() {
                return Err(Error::Usage(alloc::format!("parameter {name} has no gradient (index {})", id.index())));
            }
            if self.first[id.index()].len() != t.numel() {
                return Err(Error::Usage(alloc::format!("parameter {name} changed shape")));
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - libm::pow(beta1, self.step as f64);
        let bc2 = 1.0 - libm::pow(beta2, self.step as f64);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let t = params.get_mut(id);
            if !t.requires_grad() {
                continue;
            }
            let grad = t.grad_mut().map(core::mem::take).unwrap_or_default();
            let m = &mut self.first[id.index()];
            let v = &mut self.second[id.index()];
            for (i, x) in t.data_mut().iter_mut().enumerate() {
                let g = grad[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                *x -= lr * mh / (libm::sqrt(vh) + eps);
            }
            t.zero_grad();
        }
        Ok(())
    }
}
