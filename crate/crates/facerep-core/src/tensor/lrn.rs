use alloc::format;
use alloc::vec;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Across-channel response normalization:
/// `out[c] = in[c] / (k + (alpha/n) * sum_{c' near c} in[c']^2)^beta`.
///
/// The window constants default to the conventional `k=2, alpha=1e-4,
/// beta=0.75` and are overridable.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrnParams {
    pub n: usize,
    pub k: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl LrnParams {
    pub fn new(n: usize, k: f64, alpha: f64, beta: f64) -> Result<Self> {
        if n % 2 == 0 || n == 0 {
            return Err(Error::Argument(format!("lrn window must be odd, got {n}")));
        }
        if k <= 0.0 || alpha <= 0.0 || beta <= 0.0 {
            return Err(Error::Argument(
                "lrn constants k, alpha, beta must be positive".into(),
            ));
        }
        Ok(LrnParams { n, k, alpha, beta })
    }

    /// The published "RNorm ... 5" row with the conventional constants.
    pub fn window5() -> Self {
        LrnParams { n: 5, k: 2.0, alpha: 1e-4, beta: 0.75 }
    }
}

fn denominators<T: Scalar>(input: &Tensor<T>, p: &LrnParams) -> (usize, usize, alloc::vec::Vec<f64>) {
    let (c, h, w) = input.dims3().expect("checked by caller");
    let plane = h * w;
    let half = p.n / 2;
    let scale = p.alpha / p.n as f64;
    let mut den = vec![0.0f64; c * plane];
    for ci in 0..c {
        let lo = ci.saturating_sub(half);
        let hi = (ci + half).min(c - 1);
        for idx in 0..plane {
            let mut acc = 0.0;
            for cj in lo..=hi {
                let v = input.data()[cj * plane + idx].as_f64();
                acc += v * v;
            }
            den[ci * plane + idx] = p.k + scale * acc;
        }
    }
    (c, plane, den)
}

pub fn lrn<T: Scalar>(input: &Tensor<T>, params: &LrnParams) -> Result<Tensor<T>> {
    input.dims3()?;
    let (_c, _plane, den) = denominators(input, params);
    let mut out = input.clone();
    for (v, d) in out.data_mut().iter_mut().zip(&den) {
        *v = T::from_f64(v.as_f64() * d.powf(-params.beta));
    }
    out.debug_check_finite("lrn");
    Ok(out)
}

/// Gradient of [`lrn`] with respect to its input.
///
/// With `s[c] = k + (alpha/n) * sum x^2` over the window:
/// `grad[j] = g[j] s[j]^-b - (2 a b / n) x[j] * sum_{c: j in N(c)} g[c] x[c] s[c]^(-b-1)`.
pub fn lrn_backward<T: Scalar>(
    input: &Tensor<T>,
    params: &LrnParams,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    if grad_out.shape() != input.shape() {
        return Err(Error::Shape(format!(
            "upstream grad shape {:?} does not match lrn input {:?}",
            grad_out.shape(),
            input.shape()
        )));
    }
    let (c, plane, den) = denominators(input, params);
    let half = params.n / 2;
    let coef = 2.0 * params.alpha * params.beta / params.n as f64;
    let mut grad_in = Tensor::zeros(input.shape());
    for j in 0..c {
        let lo = j.saturating_sub(half);
        let hi = (j + half).min(c - 1);
        for idx in 0..plane {
            let xj = input.data()[j * plane + idx].as_f64();
            let gj = grad_out.data()[j * plane + idx].as_f64();
            let mut cross = 0.0;
            // channels whose window contains j
            for ci in lo..=hi {
                let x = input.data()[ci * plane + idx].as_f64();
                let g = grad_out.data()[ci * plane + idx].as_f64();
                let s = den[ci * plane + idx];
                cross += g * x * s.powf(-params.beta - 1.0);
            }
            let direct = gj * den[j * plane + idx].powf(-params.beta);
            grad_in.data_mut()[j * plane + idx] = T::from_f64(direct - coef * xj * cross);
        }
    }
    Ok(grad_in)
}
