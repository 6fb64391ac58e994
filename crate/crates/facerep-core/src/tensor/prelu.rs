use alloc::format;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// One learnable negative-side slope per channel. Flat vectors are
/// treated as one channel per element.
#[derive(Clone, Debug)]
pub struct PreluParams<T> {
    pub slopes: Tensor<T>,
}

impl<T: Scalar> PreluParams<T> {
    pub fn with_channels(channels: usize) -> Self {
        PreluParams { slopes: Tensor::full(&[channels], T::from_f64(0.25)) }
    }
}

fn channel_layout<T: Scalar>(input: &Tensor<T>, params: &PreluParams<T>) -> Result<(usize, usize)> {
    let (channels, plane) = match input.shape() {
        &[c, h, w] => (c, h * w),
        &[n] => (n, 1),
        other => return Err(Error::Shape(format!("prelu expects 1-d or 3-d input, got {other:?}"))),
    };
    if params.slopes.len() != channels {
        return Err(Error::Shape(format!(
            "prelu has {} slopes for {channels} channels",
            params.slopes.len()
        )));
    }
    Ok((channels, plane))
}

pub fn prelu<T: Scalar>(input: &Tensor<T>, params: &PreluParams<T>) -> Result<Tensor<T>> {
    let (_c, plane) = channel_layout(input, params)?;
    let mut out = input.clone();
    for (ci, chunk) in out.data_mut().chunks_exact_mut(plane).enumerate() {
        let a = params.slopes.data()[ci];
        for v in chunk {
            if *v < T::zero() {
                *v = *v * a;
            }
        }
    }
    out.debug_check_finite("prelu");
    Ok(out)
}

/// Gradients of [`prelu`]: `(input_grad, slope_grad)`. The subgradient
/// at exactly zero takes the positive branch.
pub fn prelu_backward<T: Scalar>(
    input: &Tensor<T>,
    params: &PreluParams<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (c, plane) = channel_layout(input, params)?;
    if grad_out.shape() != input.shape() {
        return Err(Error::Shape(format!(
            "upstream grad shape {:?} does not match prelu input {:?}",
            grad_out.shape(),
            input.shape()
        )));
    }
    let mut grad_in = Tensor::zeros(input.shape());
    let mut slope_grad = Tensor::zeros(&[c]);
    for ci in 0..c {
        let a = params.slopes.data()[ci];
        let xs = &input.data()[ci * plane..(ci + 1) * plane];
        let gs = &grad_out.data()[ci * plane..(ci + 1) * plane];
        let gi = &mut grad_in.data_mut()[ci * plane..(ci + 1) * plane];
        let mut acc = T::zero();
        for ((&x, &g), d) in xs.iter().zip(gs).zip(gi.iter_mut()) {
            if x < T::zero() {
                *d = g * a;
                acc = acc + g * x;
            } else {
                *d = g;
            }
        }
        slope_grad.data_mut()[ci] = acc;
    }
    Ok((grad_in, slope_grad))
}
