//! Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::model::{Network, NetworkGrads};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// Moment estimates, one buffer per parameter tensor in
/// [`Network::named_tensors`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(net: &Network) -> Self {
        let shapes: Vec<usize> = net.named_tensors().iter().map(|(_, t)| t.len()).collect();
        Self {
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

/// One update: `p -= lr * wd * p`, then the bias-corrected Adam step.
pub fn adamw_step(net: &mut Network, grads: &NetworkGrads, state: &mut AdamState, cfg: &AdamWConfig, lr: f64) {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let grad_tensors = grads.convs.iter().flat_map(|c| [c.weight.as_slice(), c.bias.as_slice()]);
    let params = net.named_tensors_mut();
    for (((_, p), g), (m, v)) in params
        .into_iter()
        .zip(grad_tensors)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for k in 0..p.len() {
            p[k] *= 1.0 - lr * cfg.weight_decay;
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
            let mh = m[k] / bc1;
            let vh = v[k] / bc2;
            p[k] -= lr * mh / (vh.sqrt() + cfg.eps);
        }
    }
}
