use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tape::ParamGrads;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one tensor per parameter.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam step with decoupled weight decay.
///
/// The whole gradient is validated before any parameter is touched, so a
/// non-finite gradient leaves both parameters and state unchanged.
pub fn adam_step(
    store: &mut ParamStore,
    grads: &ParamGrads,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.tensors.len() != store.len() || state.m.len() != store.len() {
        return Err(Error::Shape {
            op: "adam_step",
            left: vec![store.len()],
            right: vec![grads.tensors.len(), state.m.len()],
        });
    }
    for id in store.ids() {
        let g = grads.get(id);
        if g.shape() != store.get(id).shape() {
            return Err(Error::Shape {
                op: "adam_step",
                left: store.get(id).shape().to_vec(),
                right: g.shape().to_vec(),
            });
        }
        if !g.is_finite() {
            return Err(Error::NonFinite(format!("gradient of {}", store.name(id))));
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let i = id.index();
        let g = grads.get(id).data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let p = store.get_mut(id).data_mut();
        for k in 0..p.len() {
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
            let mhat = m[k] / bc1;
            let vhat = v[k] / bc2;
            p[k] -= cfg.lr * cfg.weight_decay * p[k];
            p[k] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
