use alloc::format;

use super::matmul::{matmul_nt, matmul_tn};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Fully connected layer: `out = W x + b` with `W` of shape `(M, N)`.
pub fn affine<T: Scalar>(input: &Tensor<T>, weights: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = match weights.shape() {
        &[m, n] => (m, n),
        other => return Err(Error::Shape(format!("affine weights must be 2-d, got {other:?}"))),
    };
    if input.len() != n {
        return Err(Error::Shape(format!(
            "affine expects input length {n}, got {}",
            input.len()
        )));
    }
    if bias.shape() != [m] {
        return Err(Error::Shape(format!("affine bias must have shape [{m}]")));
    }
    let mut out = Tensor::zeros(&[m]);
    // W (m x n) * x^T via dot products of W rows against x.
    matmul_nt(weights.data(), input.data(), m, n, 1, out.data_mut());
    for (o, &b) in out.data_mut().iter_mut().zip(bias.data()) {
        *o = *o + b;
    }
    out.debug_check_finite("affine");
    Ok(out)
}

/// Gradients of [`affine`]: `(input_grad, weight_grad, bias_grad)`.
pub fn affine_backward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (m, n) = match weights.shape() {
        &[m, n] => (m, n),
        other => return Err(Error::Shape(format!("affine weights must be 2-d, got {other:?}"))),
    };
    if input.len() != n || grad_out.len() != m {
        return Err(Error::Shape(format!(
            "affine backward dims: input {} (want {n}), grad {} (want {m})",
            input.len(),
            grad_out.len()
        )));
    }
    // input_grad = W^T g
    let mut input_grad = Tensor::zeros(&[n]);
    matmul_tn(weights.data(), grad_out.data(), n, m, 1, input_grad.data_mut());
    // weight_grad = g x^T (outer product)
    let mut weight_grad = Tensor::zeros(&[m, n]);
    for (row, &g) in weight_grad.data_mut().chunks_exact_mut(n).zip(grad_out.data()) {
        for (w, &x) in row.iter_mut().zip(input.data()) {
            *w = g * x;
        }
    }
    let bias_grad = grad_out.clone().reshape(&[m])?;
    Ok((input_grad, weight_grad, bias_grad))
}
