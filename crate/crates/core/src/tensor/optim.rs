//! AdamW with decoupled weight decay, global-norm clipping and mask-aware
//! updates: positions outside a parameter's mask are held at exactly zero
//! together with their moments.

use serde::{Deserialize, Serialize};

use super::{Result, Scalar, TensorError};
use crate::topology::LayerMask;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm threshold; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.1, grad_clip: Some(0.1) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Moments<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Scalar> Moments<T> {
    pub fn zeros(len: usize) -> Self {
        Moments { m: vec![T::zero(); len], v: vec![T::zero(); len] }
    }

    pub fn reset(&mut self, index: usize) {
        self.m[index] = T::zero();
        self.v[index] = T::zero();
    }
}

/// One parameter tensor as seen by the optimizer.
pub struct ParamSlot<'a, T> {
    pub data: &'a mut [T],
    pub grad: &'a [T],
    pub moments: &'a mut Moments<T>,
    pub mask: Option<&'a LayerMask>,
    pub decay: bool,
}

fn live<T>(slot: &ParamSlot<'_, T>, i: usize) -> bool {
    slot.mask.is_none_or(|m| m.is_active(i))
}

/// Global L2 norm of the gradients that will actually be applied (masked
/// positions excluded) and the factor that brings it under `threshold`.
pub fn clip_grad_norm<T: Scalar>(slots: &[ParamSlot<'_, T>], threshold: Option<f64>) -> (f64, f64) {
    let mut sq = 0.0f64;
    for slot in slots {
        for (i, &g) in slot.grad.iter().enumerate() {
            if live(slot, i) {
                let g = g.to_f64_lossy();
                sq += g * g;
            }
        }
    }
    let norm = sq.sqrt();
    let scale = match threshold {
        Some(t) if norm > t => t / norm,
        _ => 1.0,
    };
    (norm, scale)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW { config }
    }

    /// Applies update number `t` (1-based, drives bias correction).
    /// Returns the pre-clip gradient norm.
    pub fn step<T: Scalar>(&self, slots: &mut [ParamSlot<'_, T>], lr: f64, t: u64) -> Result<f64> {
        let c = &self.config;
        let (norm, scale) = clip_grad_norm(slots, c.grad_clip);
        if !(norm * scale).is_finite() {
            return Err(TensorError::NonFinite { what: format!("gradient (norm {norm})") });
        }
        let t = t.max(1) as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let [b1, b2, one_b1, one_b2] = [c.beta1, c.beta2, 1.0 - c.beta1, 1.0 - c.beta2].map(T::from_f64_lossy);
        let scale_t = T::from_f64_lossy(scale);
        let lr_t = T::from_f64_lossy(lr);
        let eps = T::from_f64_lossy(c.eps);
        let inv_bc1 = T::from_f64_lossy(1.0 / bc1);
        let inv_bc2 = T::from_f64_lossy(1.0 / bc2);
        for slot in slots.iter_mut() {
            let decay = T::from_f64_lossy(if slot.decay { c.weight_decay } else { 0.0 });
            for i in 0..slot.data.len() {
                if !live(slot, i) {
                    slot.data[i] = T::zero();
                    slot.moments.reset(i);
                    continue;
                }
                let g = slot.grad[i] * scale_t;
                let m = b1 * slot.moments.m[i] + one_b1 * g;
                let v = b2 * slot.moments.v[i] + one_b2 * g * g;
                slot.moments.m[i] = m;
                slot.moments.v[i] = v;
                let mhat = m * inv_bc1;
                let vhat = v * inv_bc2;
                let p = slot.data[i];
                slot.data[i] = p - lr_t * (mhat / (vhat.sqrt() + eps) + decay * p);
            }
        }
        Ok(norm)
    }
}
