//! Two-head cross-entropy loss.
//!
//! The summed cross-entropy of the primary and secondary heads against the
//! ordinal pattern codes, divided by the gradient accumulation interval so
//! that accumulated gradients average to the per-WSI mean.

use crate::grading::GleasonScore;
use crate::model::{
    forward_slide, log_sum_exp, Bag, DropoutMode, MilParams, ModelError, Real, SlideForward,
};

/// Cross-entropy from the forward output's probabilities.
pub fn compute_loss<T: Real>(
    fwd: &SlideForward<T>,
    label: GleasonScore,
    accumulation_interval: u32,
) -> f64 {
    let ce = |probs: &[T], target: u8| -> f64 {
        let p = probs[target as usize].as_f64();
        -(p.ln())
    };
    let total = ce(&fwd.probs_primary, label.primary().code())
        + ce(&fwd.probs_secondary, label.secondary().code());
    total / accumulation_interval as f64
}

/// Loss as a function of parameters and a bag; the scalar function whose
/// gradient [`super::backward`] computes, and the function that finite
/// differences perturb.
pub fn bag_loss<T: Real>(
    params: &MilParams<T>,
    bag: &Bag<T>,
    label: GleasonScore,
    dropout: DropoutMode,
    accumulation_interval: u32,
) -> Result<f64, ModelError> {
    let fwd = forward_slide(params, bag, dropout)?;
    Ok(loss_from_logits(
        &fwd.logits_primary,
        &fwd.logits_secondary,
        label,
        accumulation_interval,
    ))
}

/// Loss from logits via log-sum-exp so the value stays exact even for
/// extreme logits.
pub fn loss_from_logits<T: Real>(
    logits_primary: &[T],
    logits_secondary: &[T],
    label: GleasonScore,
    accumulation_interval: u32,
) -> f64 {
    let ce = |logits: &[T], target: u8| -> f64 {
        log_sum_exp(logits) - logits[target as usize].as_f64()
    };
    let total =
        ce(logits_primary, label.primary().code()) + ce(logits_secondary, label.secondary().code());
    total / accumulation_interval as f64
}
