use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{ParamStore, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || store.iter().map(|p| vec![T::zero(); p.tensor.numel()]).collect();
        Self { step: 0, m: zeros(), v: zeros() }
    }
}

/// One bias-corrected Adam update. `grads[i]` belongs to parameter `i`;
/// `None` counts as a zero gradient. Frozen parameters are left alone.
pub fn adam_step<T: Scalar>(store: &mut ParamStore<T>, grads: &[Option<&[T]>], state: &mut AdamState<T>, cfg: &AdamConfig) -> Result<()> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(Error::Shape(format!(
            "adam over {} parameters with {} gradients and {} moment slots",
            store.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let b1 = T::from_f64_lossy(cfg.beta1);
    let b2 = T::from_f64_lossy(cfg.beta2);
    let one = T::one();
    let c1 = T::from_f64_lossy(1.0 - cfg.beta1.powi(t));
    let c2 = T::from_f64_lossy(1.0 - cfg.beta2.powi(t));
    let lr = T::from_f64_lossy(cfg.lr);
    let eps = T::from_f64_lossy(cfg.eps);
    for (i, p) in store.iter_mut().enumerate() {
        if !p.trainable {
            continue;
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let data = p.tensor.data_mut();
        if m.len() != data.len() || grads[i].is_some_and(|g| g.len() != data.len()) {
            return Err(Error::Shape(format!("adam state for {} does not match its shape", p.name)));
        }
        for j in 0..data.len() {
            let g = grads[i].map_or(T::zero(), |g| g[j]);
            m[j] = b1 * m[j] + (one - b1) * g;
            v[j] = b2 * v[j] + (one - b2) * g * g;
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            data[j] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}
