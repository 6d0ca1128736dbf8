//! AdamW with bias correction and decoupled weight decay.

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// First/second moment estimates and the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState<T> {
    pub step: u64,
    pub m: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Real> AdamWState<T> {
    pub fn new(len: usize) -> Self {
        Self { step: 0, m: vec![T::zero(); len], v: vec![T::zero(); len] }
    }
}

/// One update: `p <- p * (1 - lr * wd) - lr * m_hat / (sqrt(v_hat) + eps)`.
/// Rejects non-finite gradients before touching any state.
pub fn adamw_step<T: Real>(
    params: &mut [T],
    grads: &[T],
    state: &mut AdamWState<T>,
    cfg: &AdamWConfig,
) -> Result<(), TrainError> {
    assert_eq!(params.len(), grads.len(), "parameter/gradient length mismatch");
    assert_eq!(params.len(), state.m.len(), "parameter/state length mismatch");
    if !grads.iter().all(|g| g.is_finite()) {
        return Err(TrainError::NumericalFault("gradient".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let b1 = T::from_f64_lossy(cfg.beta1);
    let b2 = T::from_f64_lossy(cfg.beta2);
    let one = T::one();
    let m_corr = T::from_f64_lossy(1.0 / (1.0 - cfg.beta1.powi(t)));
    let v_corr = T::from_f64_lossy(1.0 / (1.0 - cfg.beta2.powi(t)));
    let lr = T::from_f64_lossy(cfg.lr);
    let eps = T::from_f64_lossy(cfg.eps);
    let shrink = T::from_f64_lossy(1.0 - cfg.lr * cfg.weight_decay);
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *m = b1 * *m + (one - b1) * g;
        *v = b2 * *v + (one - b2) * g * g;
        let m_hat = *m * m_corr;
        let v_hat = *v * v_corr;
        *p = *p * shrink - lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}
