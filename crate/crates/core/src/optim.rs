//! AdamW, gradient-norm clipping and learning-rate schedules.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::params::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.05 }
    }
}

/// Decoupled weight decay Adam. Decay applies to matrices only (`ndim >= 2`),
/// leaving biases and norm affines untouched.
#[derive(Clone, Debug)]
pub struct AdamW {
    cfg: AdamWConfig,
    steps: BTreeMap<String, u64>,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self { cfg, steps: BTreeMap::new(), m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// One update. `lr(name)` gives each parameter's rate; `None` freezes it.
    /// Parameters without a gradient entry are skipped.
    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamStore, lr: impl Fn(&str) -> Option<f64>) {
        let AdamWConfig { beta1, beta2, eps, weight_decay } = self.cfg;
        for (name, p) in params.iter_mut() {
            let (Some(rate), Ok(g)) = (lr(name), grads.get(name)) else {
                continue;
            };
            let t = self.steps.entry(name.clone()).or_insert(0);
            *t += 1;
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; p.len()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; p.len()]);
            let c1 = 1.0 - beta1.powi(*t as i32);
            let c2 = 1.0 - beta2.powi(*t as i32);
            let decay = if p.ndim() >= 2 { weight_decay } else { 0.0 };
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                *x -= rate * decay * *x;
                *x -= rate * (*mi / c1) / ((*vi / c2).sqrt() + eps);
            }
        }
    }
}

/// Global L2 norm of all gradients.
pub fn grad_norm(grads: &ParamStore) -> f64 {
    grads.iter().flat_map(|(_, g)| g.data()).map(|x| x * x).sum::<f64>().sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// Cosine annealing from `base` at step 0 to 0 at `total`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let t = step.min(total) as f64 / total as f64;
    base * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Square-root rule: `base * sqrt(batch / base_batch)`.
pub fn sqrt_scaled(base: f64, batch: usize, base_batch: usize) -> f64 {
    base * (batch as f64 / base_batch as f64).sqrt()
}
