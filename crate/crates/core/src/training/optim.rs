use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::numerics::ParamStore;
use crate::{Error, Result};

/// AdamW hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// Moment estimates per parameter name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub hyper: AdamW,
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl OptimizerState {
    pub fn new(hyper: AdamW) -> Self {
        OptimizerState {
            hyper,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

/// Norm and bias parameters, order indicators, SSM `a_log` and `D`, and
/// learnable tokens are not weight-decayed.
pub fn skips_weight_decay(name: &str) -> bool {
    name.contains("norm.")
        || name.ends_with(".bias")
        || name.starts_with("indicator.")
        || name.ends_with(".a_log")
        || name.ends_with("ssm.d")
        || name.ends_with("token")
}

/// One decoupled-weight-decay Adam step on every parameter that has a
/// gradient: `p ← p·(1 − lr·wd) − lr·m̂ / (√v̂ + ε)`.
pub fn adamw_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Vec<f64>>,
    state: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::invalid("adamw", format!("learning rate {lr}")));
    }
    for (name, g) in grads {
        let p = params.get(name)?;
        if p.len() != g.len() {
            return Err(Error::shape(
                "adamw",
                format!("`{name}`: {} values, {} gradients", p.len(), g.len()),
            ));
        }
    }
    state.step += 1;
    let AdamW {
        beta1,
        beta2,
        eps,
        weight_decay,
    } = state.hyper;
    let t = state.step as f64;
    let c1 = 1.0 - libm::pow(beta1, t);
    let c2 = 1.0 - libm::pow(beta2, t);
    for (name, g) in grads {
        let p = params.get_mut(name)?;
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| alloc::vec![0.0; g.len()]);
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| alloc::vec![0.0; g.len()]);
        if m.len() != g.len() || v.len() != g.len() {
            return Err(Error::shape("adamw", format!("moment shape for `{name}`")));
        }
        let decay = if skips_weight_decay(name) {
            0.0
        } else {
            weight_decay
        };
        for (((w, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g)
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *mi = beta1 * *mi + (1.0 - beta1) * gi;
            *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *w *= 1.0 - lr * decay;
            *w -= lr * mhat / (libm::sqrt(vhat) + eps);
        }
    }
    Ok(())
}

/// Linear warmup from 0 to `base_lr`, then half-cosine decay to `min_lr`
/// at `total_steps`.
pub fn cosine_lr(
    step: usize,
    total_steps: usize,
    warmup_steps: usize,
    base_lr: f64,
    min_lr: f64,
) -> f64 {
    if warmup_steps > 0 && step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    if total_steps <= warmup_steps {
        return base_lr;
    }
    let progress = ((step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64).min(1.0);
    min_lr + 0.5 * (base_lr - min_lr) * (1.0 + libm::cos(core::f64::consts::PI * progress))
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Vec<f64>>, max_norm: f64) -> f64 {
    let norm = libm::sqrt(grads.values().flatten().map(|g| g * g).sum::<f64>());
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grads.values_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}
