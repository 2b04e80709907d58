//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::params::{ParamGroup, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates for every parameter in a store.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros = || store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        AdamState {
            config,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    /// One update of every parameter from its accumulated gradient.
    /// `lr` maps a parameter group to its current learning rate.
    pub fn step(&mut self, store: &mut ParamStore, lr: impl Fn(ParamGroup) -> f64) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(shape_err(
                "adam_step",
                format!("state for {} params, store has {}", self.m.len(), store.len()),
            ));
        }
        for (id, p) in store.iter() {
            if self.m[id.index()].shape() != p.value.shape() {
                return Err(shape_err("adam_step", format!("moment shape differs for {}", p.name)));
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let param = store.get_mut(id);
            let rate = lr(param.group);
            let m = self.m[id.index()].data_mut();
            let v = self.v[id.index()].data_mut();
            let grad = param.grad.data();
            let value = param.value.data_mut();
            for j in 0..value.len() {
                let g = grad[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                value[j] -= rate * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }

    /// Rounds the moment estimates to `f32`, matching the on-disk precision.
    pub fn round_to_f32(&mut self) {
        for t in self.m.iter_mut().chain(self.v.iter_mut()) {
            t.round_to_f32();
        }
    }
}
