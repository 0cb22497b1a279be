//! Adam with bias correction over the CMP weight set.

use serde::{Deserialize, Serialize};

use crate::cmp::Weights;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(weights: &Weights) -> Self {
        let zeros: Vec<Tensor> = weights
            .named()
            .into_iter()
            .map(|(_, t)| Tensor::zeros(t.shape()))
            .collect();
        AdamState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One Adam update. Fails without touching anything if a gradient is not finite.
pub fn optimizer_step(
    weights: &mut Weights,
    grads: &Weights,
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    let named = grads.named();
    if named.len() != state.m.len() {
        return Err(Error::Shape(
            "optimizer state does not match weights".into(),
        ));
    }
    for (name, g) in &named {
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in weights.tensors_mut().into_iter().enumerate() {
        let g = named[i].1.data();
        if p.shape() != named[i].1.shape() {
            return Err(Error::Shape(format!(
                "gradient shape mismatch for {}",
                named[i].0
            )));
        }
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((w, gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m).zip(v) {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let mhat = *mi / bc1;
            let vhat = *vi / bc2;
            *w -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
