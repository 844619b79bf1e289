use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First and second moments per parameter tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// Decoupled weight decay, then one bias-corrected Adam update.
pub fn adamw_step(params: &mut [&mut Tensor<f32>], grads: &[Tensor<f32>], state: &mut AdamState, lr: f64, config: &AdamWConfig) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::Usage(format!("{} parameters but {} gradients", params.len(), grads.len())));
    }
    if let Some(i) = params.iter().zip(grads).position(|(p, g)| p.shape() != g.shape()) {
        return Err(Error::Usage(format!(
            "parameter {i} has shape {:?} but its gradient {:?}",
            params[i].shape(),
            grads[i].shape()
        )));
    }
    if state.m.is_empty() {
        state.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
        state.v = state.m.clone();
    } else if state.m.len() != params.len() || state.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.numel()) {
        return Err(Error::Usage("optimizer state does not match the parameter list".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - config.beta1.powi(t);
    let c2 = 1.0 - config.beta2.powi(t);
    let decay = 1.0 - lr * config.weight_decay;
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        for (((x, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            let g = g as f64;
            *m = config.beta1 * *m + (1.0 - config.beta1) * g;
            *v = config.beta2 * *v + (1.0 - config.beta2) * g * g;
            let update = (*m / c1) / ((*v / c2).sqrt() + config.eps);
            *x = ((*x as f64) * decay - lr * update) as f32;
        }
    }
    Ok(())
}
