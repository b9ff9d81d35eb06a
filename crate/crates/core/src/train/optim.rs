use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelSnapshot, Params};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied to matrices only (not norms or biases).
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Params,
    pub v: Params,
    pub hyper: OptimizerConfig,
}

impl OptimizerState {
    pub fn new(model: &ModelSnapshot, hyper: OptimizerConfig) -> Self {
        let zeros = model.params().zeros_like();
        OptimizerState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
            hyper,
        }
    }
}

/// One AdamW step. Returns a new snapshot and state; inputs are untouched.
pub fn optimizer_step(model: &ModelSnapshot, grads: &Params, state: &OptimizerState) -> Result<(ModelSnapshot, OptimizerState)> {
    grads.check_shapes(model.config())?;
    if let Some(name) = grads.first_non_finite() {
        return Err(Error::NonFiniteGradient(name));
    }
    let h = &state.hyper;
    let t = state.step + 1;
    let mut params = model.params().clone();
    let mut m = state.m.clone();
    let mut v = state.v.clone();
    let grad_views = grads.tensors();
    let m_slices = m.slices_mut();
    let v_slices = v.slices_mut();
    for (p, ((mi, vi), (_, shape, g))) in params
        .slices_mut()
        .into_iter()
        .zip(m_slices.into_iter().zip(v_slices).zip(&grad_views))
    {
        let wd = if shape.len() == 2 { h.weight_decay } else { 0.0 };
        adamw_update(p, mi, vi, g, h, t, wd);
    }
    let next = model.with_params(params, model.version() + 1)?;
    Ok((
        next,
        OptimizerState {
            step: t,
            m,
            v,
            hyper: h.clone(),
        },
    ))
}

/// In-place AdamW update of one flat tensor at step `t` (1-based).
pub(crate) fn adamw_update(p: &mut [f64], m: &mut [f64], v: &mut [f64], g: &[f64], h: &OptimizerConfig, t: u64, weight_decay: f64) {
    let bc1 = 1.0 - h.beta1.powi(t as i32);
    let bc2 = 1.0 - h.beta2.powi(t as i32);
    for j in 0..p.len() {
        let gj = g[j];
        m[j] = h.beta1 * m[j] + (1.0 - h.beta1) * gj;
        v[j] = h.beta2 * v[j] + (1.0 - h.beta2) * gj * gj;
        let m_hat = m[j] / bc1;
        let v_hat = v[j] / bc2;
        p[j] = p[j] - h.lr * weight_decay * p[j] - h.lr * m_hat / (v_hat.sqrt() + h.eps);
    }
}
