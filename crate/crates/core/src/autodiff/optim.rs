use std::f64::consts::PI;

use super::params::ParamStore;
use super::tape::AutodiffError;

/// Adam hyperparameters other than the learning rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update over every parameter, then clears the
/// gradients. Nothing is modified if any gradient is non-finite.
pub fn adam_step(store: &mut ParamStore, lr: f64, cfg: AdamConfig) -> Result<(), AutodiffError> {
    if let Some(bad) = store.ids().find(|&id| !store.grad(id).all_finite()) {
        return Err(AutodiffError::NonFiniteGradient(store.name(bad).to_string()));
    }
    let t = store.step() + 1;
    store.set_step(t);
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let (value, m, v, g) = store.moments_mut(id);
        for (((p, mi), vi), &gi) in value
            .data_mut()
            .iter_mut()
            .zip(m.data_mut())
            .zip(v.data_mut())
            .zip(g.data())
        {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    store.zero_grads();
    Ok(())
}

/// Per-epoch cosine decay from `lr_max` at epoch 0 to `lr_min` at epoch `epochs - 1`.
pub fn cosine_lr(epoch: usize, epochs: usize, lr_max: f64, lr_min: f64) -> f64 {
    if epochs <= 1 {
        return lr_max;
    }
    let progress = epoch.min(epochs - 1) as f64 / (epochs - 1) as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (PI * progress).cos())
}
