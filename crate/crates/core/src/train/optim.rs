//! Adam, SGD with momentum and decoupled weight decay over named tensors.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::{ParameterStore, Role};
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self { lr: 1e-3, momentum: 0.9 }
    }
}

/// Bias-corrected Adam update of one tensor at step `t` (1-based).
pub fn adam_step<T: Scalar>(param: &mut [T], grad: &[T], m: &mut [f64], v: &mut [f64], t: u64, cfg: &AdamConfig) {
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..param.len() {
        let g = grad[i].as_f64();
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let step = cfg.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.eps);
        param[i] = T::of(param[i].as_f64() - step);
    }
}

/// `v ← μ v + g; w ← w − lr v`.
pub fn sgd_momentum_step(param: &mut [f32], grad: &[f32], velocity: &mut [f64], cfg: &SgdConfig) {
    for i in 0..param.len() {
        velocity[i] = cfg.momentum * velocity[i] + grad[i] as f64;
        param[i] = (param[i] as f64 - cfg.lr * velocity[i]) as f32;
    }
}

/// `w ← w (1 − lr λ)`.
pub fn apply_decoupled_weight_decay(param: &mut [f32], lr: f64, lambda: f64) {
    let keep = 1.0 - lr * lambda;
    for w in param {
        *w = (*w as f64 * keep) as f32;
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Optimizer {
    Adam(AdamConfig),
    Sgd(SgdConfig),
}

impl Optimizer {
    pub fn lr(&self) -> f64 {
        match self {
            Optimizer::Adam(c) => c.lr,
            Optimizer::Sgd(c) => c.lr,
        }
    }
}

/// Moment or velocity buffers keyed by parameter name, plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub optimizer: Optimizer,
    pub weight_decay: f64,
    pub step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl OptimizerState {
    pub fn new(optimizer: Optimizer, weight_decay: f64) -> Self {
        Self {
            optimizer,
            weight_decay,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    /// First-moment (Adam) or velocity (SGD) buffer of `name`.
    pub fn buffer(&self, name: &str) -> Option<&[f64]> {
        self.first.get(name).map(Vec::as_slice)
    }

    /// Applies one update with the given gradients; kernels are also decayed.
    pub fn apply(&mut self, store: &mut ParameterStore, grads: &[(String, Vec<f32>)]) -> Result<()> {
        self.step += 1;
        for (name, g) in grads {
            let param = store.get_mut(name)?;
            if param.numel() != g.len() {
                return Err(Error::shape("optimizer", format!("{name}: {} weights, {} gradients", param.numel(), g.len())));
            }
            let w = param.data_mut();
            if self.weight_decay > 0.0 && Role::of(name)? == Role::Kernel {
                apply_decoupled_weight_decay(w, self.optimizer.lr(), self.weight_decay);
            }
            let m = self.first.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            if m.len() != g.len() {
                return Err(Error::shape("optimizer", format!("{name}: buffer of {} for {}", m.len(), g.len())));
            }
            match &self.optimizer {
                Optimizer::Adam(cfg) => {
                    let v = self.second.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
                    adam_step(w, g, m, v, self.step, cfg);
                }
                Optimizer::Sgd(cfg) => sgd_momentum_step(w, g, m, cfg),
            }
        }
        Ok(())
    }
}
