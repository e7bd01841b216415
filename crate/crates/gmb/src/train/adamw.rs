//! Adaptive-moment optimizer with decoupled weight decay.
//!
//! Bias-corrected first/second moments drive the gradient step; weight
//! decay multiplies parameters directly (param -= lr * wd * param) instead
//! of entering the moment estimates. Bias tensors are exempt from decay.

use crate::model::{Gradients, MilParams, Real};

use super::{TrainConfig, TrainError};

#[derive(Debug, Clone)]
pub struct AdamWState<T> {
    pub step: u64,
    /// Per tensor, in the owning params' tensor order: (name, m, v).
    pub moments: Vec<(&'static str, Vec<T>, Vec<T>)>,
}

impl<T: Real> AdamWState<T> {
    pub fn new(params: &MilParams<T>) -> Self {
        AdamWState {
            step: 0,
            moments: params
                .tensor_names()
                .into_iter()
                .map(|name| {
                    let len = params.tensor(name).len();
                    (name, vec![T::zero(); len], vec![T::zero(); len])
                })
                .collect(),
        }
    }
}

/// One optimizer step. Rejects non-finite gradients, naming the tensor.
pub fn optimizer_step<T: Real>(
    params: &mut MilParams<T>,
    grads: &Gradients<T>,
    state: &mut AdamWState<T>,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    for (name, g) in &grads.entries {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(TrainError::NonFiniteGradient {
                tensor: name.to_string(),
            });
        }
    }
    state.step += 1;
    let t = state.step;
    let beta1 = T::from_f64_lossy(cfg.beta1);
    let beta2 = T::from_f64_lossy(cfg.beta2);
    let one_minus_beta1 = T::from_f64_lossy(1.0 - cfg.beta1);
    let one_minus_beta2 = T::from_f64_lossy(1.0 - cfg.beta2);
    let bias1 = T::from_f64_lossy(1.0 - cfg.beta1.powi(t as i32));
    let bias2 = T::from_f64_lossy(1.0 - cfg.beta2.powi(t as i32));
    let lr = T::from_f64_lossy(cfg.lr);
    let eps = T::from_f64_lossy(cfg.eps);
    let decay = T::from_f64_lossy(cfg.lr * cfg.weight_decay);

    for ((name, m, v), (gname, g)) in state.moments.iter_mut().zip(&grads.entries) {
        debug_assert_eq!(name, gname);
        let apply_decay = name.ends_with(".w") && cfg.weight_decay > 0.0;
        let values = params.tensor_mut(name);
        for i in 0..values.len() {
            let gi = g[i];
            m[i] = beta1 * m[i] + one_minus_beta1 * gi;
            v[i] = beta2 * v[i] + one_minus_beta2 * gi * gi;
            let m_hat = m[i] / bias1;
            let v_hat = v[i] / bias2;
            let mut update = lr * m_hat / (v_hat.sqrt() + eps);
            if apply_decay {
                update = update + decay * values[i];
            }
            values[i] = values[i] - update;
        }
    }
    Ok(())
}
