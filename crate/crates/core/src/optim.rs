//! AdamW with decoupled weight decay, gradient clipping and the step-decay
//! learning-rate schedule.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::ParamStore;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
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
            weight_decay: 1e-2,
        }
    }
}

/// First/second moments per parameter plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<R> {
    pub step: u64,
    pub m: Vec<Tensor<R>>,
    pub v: Vec<Tensor<R>>,
}

impl<R: Real> AdamState<R> {
    pub fn new(params: &ParamStore<R>) -> Self {
        let zeros: Vec<Tensor<R>> = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        AdamState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn check_layout(&self, params: &ParamStore<R>) -> Result<()> {
        if self.m.len() != params.len() || self.v.len() != params.len() {
            return Err(Error::StateShapeMismatch("parameter count".into()));
        }
        for ((p, m), v) in params.iter().zip(&self.m).zip(&self.v) {
            if m.shape() != p.value.shape() || v.shape() != p.value.shape() {
                return Err(Error::StateShapeMismatch(p.name.clone()));
            }
        }
        Ok(())
    }
}

/// One AdamW update from the gradients accumulated in `params`:
///
/// `theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * theta)`
pub fn adamw_step<R: Real>(params: &mut ParamStore<R>, state: &mut AdamState<R>, lr: f64, cfg: &AdamWConfig) -> Result<()> {
    state.check_layout(params)?;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - libm::pow(cfg.beta1, t as f64);
    let bc2 = 1.0 - libm::pow(cfg.beta2, t as f64);
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let theta = p.value.data_mut();
        let grad = p.grad.data();
        for i in 0..theta.len() {
            let g = grad[i].to_f64();
            let mi = cfg.beta1 * m.data()[i].to_f64() + (1.0 - cfg.beta1) * g;
            let vi = cfg.beta2 * v.data()[i].to_f64() + (1.0 - cfg.beta2) * g * g;
            m.data_mut()[i] = R::from_f64(mi);
            v.data_mut()[i] = R::from_f64(vi);
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            let th = theta[i].to_f64();
            let update = m_hat / (libm::sqrt(v_hat) + cfg.eps) + cfg.weight_decay * th;
            theta[i] = R::from_f64(th - lr * update);
        }
    }
    Ok(())
}

/// Global L2 norm of all accumulated gradients.
pub fn grad_norm<R: Real>(params: &ParamStore<R>) -> f64 {
    let sq: f64 = params
        .iter()
        .flat_map(|p| p.grad.data().iter())
        .map(|g| {
            let g = g.to_f64();
            g * g
        })
        .sum();
    libm::sqrt(sq)
}

/// Rescales gradients so their global norm is at most `max_norm`; returns the
/// norm before clipping. `max_norm <= 0` disables clipping.
pub fn clip_grad_norm<R: Real>(params: &mut ParamStore<R>, max_norm: f64) -> f64 {
    let norm = grad_norm(params);
    if max_norm > 0.0 && norm > max_norm {
        let s = R::from_f64(max_norm / norm);
        for p in params.iter_mut() {
            p.grad.scale_assign(s);
        }
    }
    norm
}

/// Step decay: `lr0` before `decay_epoch`, `lr0 * decay_factor` from then on.
///
/// Evaluated as `lr0 / (1 / decay_factor)` so that a factor of 0.1 yields
/// exactly `lr0 / 10`.
pub fn lr_at(epoch: usize, lr0: f64, decay_epoch: usize, decay_factor: f64) -> f64 {
    if epoch < decay_epoch {
        lr0
    } else {
        lr0 / (1.0 / decay_factor)
    }
}
