//! AdamW with bias-corrected moments and decoupled weight decay.
//!
//! ```text
//! m ← β1 m + (1 − β1) g
//! v ← β2 v + (1 − β2) g²
//! θ ← θ − lr · m̂ / (√v̂ + ε) − lr · λ · θ     m̂ = m / (1 − β1ᵗ), v̂ = v / (1 − β2ᵗ)
//! ```

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::tensor::ParamStore;
use crate::math;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(default, deny_unknown_fields))]
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

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config(format!("betas must lie in [0, 1): {} {}", self.beta1, self.beta2)));
        }
        if !(self.lr >= 0.0) || !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("invalid AdamW settings {self:?}")));
        }
        Ok(())
    }
}

/// One AdamW update of a flat parameter slice. `step` is the 1-based step
/// number after incrementing.
pub fn adamw_update(
    theta: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    step: u64,
    cfg: &AdamWConfig,
    lr: f64,
) -> Result<()> {
    if grad.len() != theta.len() || m.len() != theta.len() || v.len() != theta.len() {
        return Err(Error::shape(
            "adamw_step",
            format!("param {} / grad {} / moments {} {}", theta.len(), grad.len(), m.len(), v.len()),
        ));
    }
    let bc1 = 1.0 - math::powi(cfg.beta1, step as i32);
    let bc2 = 1.0 - math::powi(cfg.beta2, step as i32);
    for i in 0..theta.len() {
        let g = grad[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        theta[i] -= lr * (m_hat / (math::sqrt(v_hat) + cfg.eps) + cfg.weight_decay * theta[i]);
    }
    Ok(())
}

/// Optimizer state over a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, step: 0, moments: BTreeMap::new() })
    }

    /// Applies one update to every trainable parameter that carries a
    /// gradient. `lr_scale(name)` multiplies the learning rate per tensor;
    /// a scale of 0 leaves the tensor and its moments untouched.
    pub fn step(&mut self, store: &mut ParamStore, lr_scale: impl Fn(&str) -> f64) -> Result<()> {
        self.step += 1;
        for (name, p) in store.iter_mut() {
            if !p.trainable {
                continue;
            }
            let scale = lr_scale(name);
            if scale == 0.0 {
                continue;
            }
            let Some(grad) = p.tensor.grad().map(<[f64]>::to_vec) else { continue };
            let n = p.tensor.numel();
            let (m, v) = self
                .moments
                .entry(String::from(name))
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            adamw_update(p.tensor.data_mut(), &grad, m, v, self.step, &self.cfg, self.cfg.lr * scale)?;
        }
        Ok(())
    }
}
