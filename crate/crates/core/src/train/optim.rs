//! Adam with bias correction, and the two-phase learning-rate schedule.

use crate::error::{Error, Result};
use crate::model::ModelParams;

/// Step-function learning rate: `lr_initial` until `switch_step`, then
/// `lr_final`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub lr_initial: f32,
    pub lr_final: f32,
    pub switch_step: u64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule { lr_initial: 1e-4, lr_final: 0.5e-5, switch_step: 250_000 }
    }
}

/// Learning rate in effect at a (0-based) step.
pub fn lr_at(step: u64, schedule: &LrSchedule) -> f32 {
    if step < schedule.switch_step {
        schedule.lr_initial
    } else {
        schedule.lr_final
    }
}

/// First/second-moment buffers aligned with the canonical parameter order.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let mut m = Vec::new();
        params.for_each(|_, t| m.push(vec![0.0f32; t.numel()]));
        let v = m.clone();
        AdamState { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m, v }
    }
}

/// One bias-corrected Adam update, in place. `grads` must align with the
/// canonical parameter order (one buffer per tensor).
pub fn adam_step(
    params: &mut ModelParams,
    grads: &[Vec<f32>],
    state: &mut AdamState,
    lr: f32,
) -> Result<()> {
    let n_tensors = state.m.len();
    if grads.len() != n_tensors {
        return Err(Error::Usage(format!(
            "gradient set has {} tensors, optimizer state has {n_tensors}",
            grads.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (beta1, beta2, eps) = (state.beta1, state.beta2, state.eps);
    let mut idx = 0usize;
    let mut bad: Option<String> = None;
    params.for_each_mut(|name, tensor| {
        let g = &grads[idx];
        if g.len() != tensor.numel() {
            if bad.is_none() {
                bad = Some(format!("gradient for {name} has {} elements, want {}", g.len(), tensor.numel()));
            }
            idx += 1;
            return;
        }
        let m = &mut state.m[idx];
        let v = &mut state.v[idx];
        let data = tensor.data_mut();
        for i in 0..g.len() {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        idx += 1;
    });
    match bad {
        Some(msg) => Err(Error::Usage(msg)),
        None => Ok(()),
    }
}

/// Global-norm gradient clipping (optional; disabled when `max_norm <= 0`).
pub fn clip_grads(grads: &mut [Vec<f32>], max_norm: f32) {
    if max_norm <= 0.0 {
        return;
    }
    let total: f64 = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|&v| (v as f64) * (v as f64))
        .sum();
    let norm = total.sqrt() as f32;
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
}
