use alloc::format;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Softmax cross-entropy with max-subtraction stabilization.
///
/// Returns `(loss, grad)` where `grad = softmax(logits) - one_hot(label)`.
pub fn softmax_xent<T: Scalar>(logits: &Tensor<T>, label: usize) -> Result<(T, Tensor<T>)> {
    let k = logits.len();
    if logits.shape().len() != 1 {
        return Err(Error::Shape(format!(
            "softmax expects a flat logit vector, got {:?}",
            logits.shape()
        )));
    }
    if label >= k {
        return Err(Error::Argument(format!("label {label} out of range for {k} classes")));
    }
    let max = logits.data().iter().copied().fold(T::neg_infinity(), T::max);
    let mut grad = logits.map(|v| (v - max).exp());
    let total: T = grad.data().iter().copied().sum();
    let loss = total.ln() - (logits.data()[label] - max);
    let inv = T::one() / total;
    for v in grad.data_mut() {
        *v = *v * inv;
    }
    grad.data_mut()[label] = grad.data()[label] - T::one();
    grad.debug_check_finite("softmax_xent");
    Ok((loss, grad))
}
