//! Adaptive-moment optimizer with decoupled weight decay, plus the global
//! gradient-norm clip and the linear-warmup schedule used by the trainer.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::ParamSet;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;
pub const WEIGHT_DECAY: f64 = 0.01;
pub const CLIP_NORM: f64 = 1.0;

/// Learning rate at 1-based step `t`: linear ramp `lr * t / warmup` while
/// `t < warmup`, constant `lr` from then on.
pub fn lr_at(lr: f64, warmup: usize, t: usize) -> f64 {
    if warmup == 0 || t >= warmup {
        lr
    } else {
        lr * t as f64 / warmup as f64
    }
}

/// Scale every gradient by `CLIP_NORM / norm` when the global L2 norm
/// exceeds `CLIP_NORM`. Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Vec<f64>>) -> f64 {
    let sq: f64 = grads.values().flat_map(|g| g.iter()).map(|g| g * g).sum();
    let norm = sq.sqrt();
    if norm > CLIP_NORM {
        let scale = CLIP_NORM / norm;
        for g in grads.values_mut() {
            for v in g.iter_mut() {
                *v *= scale;
            }
        }
    }
    norm
}

struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// First/second-moment state per named parameter. Weight decay is decoupled:
/// it subtracts `lr * wd * theta` alongside the moment update instead of
/// entering the gradient.
pub struct AdamW {
    lr: f64,
    warmup: usize,
    t: usize,
    state: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(lr: f64, warmup: usize) -> AdamW {
        AdamW { lr, warmup, t: 0, state: BTreeMap::new() }
    }

    /// Completed update count.
    pub fn steps_taken(&self) -> usize {
        self.t
    }

    /// Apply one update from pre-clipped gradients. Returns the learning
    /// rate used. Every parameter must have a gradient of matching length.
    pub fn step(&mut self, params: &mut ParamSet, grads: &BTreeMap<String, Vec<f64>>) -> Result<f64> {
        self.t += 1;
        let lr_t = lr_at(self.lr, self.warmup, self.t);
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        for (name, tensor) in params.iter_mut() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::Contract(format!("no gradient for parameter '{name}'")))?;
            if g.len() != tensor.data.len() {
                return Err(Error::Contract(format!(
                    "gradient for '{name}' has {} elements, parameter has {}",
                    g.len(),
                    tensor.data.len()
                )));
            }
            let slot = self
                .state
                .entry(name.to_string())
                .or_insert_with(|| Moments { m: vec![0.0; g.len()], v: vec![0.0; g.len()] });
            for (i, &gi) in g.iter().enumerate() {
                slot.m[i] = BETA1 * slot.m[i] + (1.0 - BETA1) * gi;
                slot.v[i] = BETA2 * slot.v[i] + (1.0 - BETA2) * gi * gi;
                let m_hat = slot.m[i] / bc1;
                let v_hat = slot.v[i] / bc2;
                let p = tensor.data[i];
                tensor.data[i] = p - lr_t * (m_hat / (v_hat.sqrt() + EPS) + WEIGHT_DECAY * p);
            }
        }
        Ok(lr_t)
    }
}
