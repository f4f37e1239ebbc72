//! Adaptive-moment optimizer with decoupled weight decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{ParamStore, Tensor2};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    /// Step after which the learning rate is multiplied by `decay_factor`.
    pub decay_step: Option<u64>,
    pub decay_factor: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 5e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: 1.0,
            decay_step: None,
            decay_factor: 0.1,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.grad_clip >= 0.0
            && self.decay_factor > 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, (Tensor2, Tensor2)>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Global L2 norm of all accumulated gradients.
    pub fn grad_norm(store: &ParamStore) -> f64 {
        store
            .iter()
            .map(|(_, p)| p.grad.data().iter().map(|g| g * g).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    /// Learning rate of the next step.
    pub fn current_lr(&self) -> f64 {
        match self.config.decay_step {
            Some(d) if self.step >= d => self.config.lr * self.config.decay_factor,
            _ => self.config.lr,
        }
    }

    /// Applies one update from the accumulated gradients, then zeroes them.
    pub fn step(&mut self, store: &mut ParamStore) {
        let lr = self.current_lr();
        self.step += 1;
        let c = self.config;
        if lr == 0.0 {
            store.zero_grads();
            return;
        }
        let norm = Self::grad_norm(store);
        let clip = if c.grad_clip > 0.0 && norm > c.grad_clip {
            c.grad_clip / norm
        } else {
            1.0
        };
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (name, p) in store.iter_mut() {
            let (m, v) = self.moments.entry(name.to_string()).or_insert_with(|| {
                let (r, k) = p.value.shape();
                (Tensor2::zeros(r, k), Tensor2::zeros(r, k))
            });
            let w = p.value.data_mut();
            let g = p.grad.data();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for i in 0..w.len() {
                let gi = g[i] * clip;
                md[i] = c.beta1 * md[i] + (1.0 - c.beta1) * gi;
                vd[i] = c.beta2 * vd[i] + (1.0 - c.beta2) * gi * gi;
                let mh = md[i] / bc1;
                let vh = vd[i] / bc2;
                w[i] -= lr * (mh / (vh.sqrt() + c.eps) + c.weight_decay * w[i]);
            }
        }
        store.zero_grads();
    }
}
