use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Infer,
}

/// Survivor mask from one training-mode dropout draw, replayed by the
/// backward pass.
#[derive(Clone, Debug)]
pub struct DropoutMask {
    pub keep: Vec<bool>,
    pub rate: f64,
}

/// Inverted dropout: each element is zeroed with probability `rate` and
/// survivors are scaled by `1/(1-rate)`. Inference mode is the identity.
pub fn dropout<T: Scalar, R: Rng>(
    input: &Tensor<T>,
    rate: f64,
    rng: &mut R,
    phase: Phase,
) -> Result<(Tensor<T>, Option<DropoutMask>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Argument(format!("dropout rate must be in [0, 1), got {rate}")));
    }
    if phase == Phase::Infer || rate == 0.0 {
        return Ok((input.clone(), None));
    }
    let scale = T::from_f64(1.0 / (1.0 - rate));
    let mut out = input.clone();
    let keep: Vec<bool> = out
        .data_mut()
        .iter_mut()
        .map(|v| {
            let kept = rng.random::<f64>() >= rate;
            *v = if kept { *v * scale } else { T::zero() };
            kept
        })
        .collect();
    Ok((out, Some(DropoutMask { keep, rate })))
}

/// Replays the forward mask on the upstream gradient.
pub fn dropout_backward<T: Scalar>(mask: &DropoutMask, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if mask.keep.len() != grad_out.len() {
        return Err(Error::State(format!(
            "dropout mask covers {} elements, gradient has {}",
            mask.keep.len(),
            grad_out.len()
        )));
    }
    let scale = T::from_f64(1.0 / (1.0 - mask.rate));
    let mut grad = grad_out.clone();
    for (g, &kept) in grad.data_mut().iter_mut().zip(&mask.keep) {
        *g = if kept { *g * scale } else { T::zero() };
    }
    Ok(grad)
}
