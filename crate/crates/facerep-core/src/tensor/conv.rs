use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::matmul::{matmul, matmul_nt, matmul_tn};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Parameters of one 2-d convolution: `kernel` is `(out_ch, in_ch, kh, kw)`.
#[derive(Clone, Debug)]
pub struct ConvParams<T> {
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> ConvParams<T> {
    pub fn new(kernel: Tensor<T>, bias: Tensor<T>, stride: usize, padding: usize) -> Result<Self> {
        let [out_ch, _in_ch, kh, kw] = match kernel.shape() {
            &[o, i, h, w] => [o, i, h, w],
            other => {
                return Err(Error::Shape(format!("conv kernel must be 4-d, got {other:?}")))
            }
        };
        if kh != kw || !(kh == 1 || kh == 3) {
            return Err(Error::Shape(format!("conv kernel must be square 1x1 or 3x3, got {kh}x{kw}")));
        }
        if bias.shape() != [out_ch] {
            return Err(Error::Shape(format!(
                "conv bias must have shape [{out_ch}], got {:?}",
                bias.shape()
            )));
        }
        if stride == 0 {
            return Err(Error::Argument("conv stride must be positive".into()));
        }
        Ok(ConvParams { kernel, bias, stride, padding })
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.shape()[1]
    }

    pub fn kernel_side(&self) -> usize {
        self.kernel.shape()[2]
    }
}

fn out_extent(extent: usize, k: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = extent + 2 * padding;
    if padded < k {
        return Err(Error::Shape(format!(
            "window {k} larger than padded extent {padded}"
        )));
    }
    Ok((padded - k) / stride + 1)
}

/// Lowers the padded input into a `(in_ch*kh*kw) x (oh*ow)` column matrix.
fn im2col<T: Scalar>(
    input: &Tensor<T>,
    k: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let (c, h, w) = input.dims3().expect("checked by caller");
    let mut cols = vec![T::zero(); c * k * k * oh * ow];
    let data = input.data();
    let row_len = oh * ow;
    for ci in 0..c {
        let plane = &data[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &mut cols[(ci * k * k + ki * k + kj) * row_len..][..row_len];
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let dst = &mut row[oy * ow..(oy + 1) * ow];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kj) as isize - padding as isize;
                        if ix >= 0 && ix < w as isize {
                            *d = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatters a column matrix back onto the input grid, accumulating overlaps.
fn col2im<T: Scalar>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
    oh: usize,
    ow: usize,
) -> Tensor<T> {
    let mut out = Tensor::zeros(&[c, h, w]);
    let data = out.data_mut();
    let row_len = oh * ow;
    for ci in 0..c {
        let plane = &mut data[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = &cols[(ci * k * k + ki * k + kj) * row_len..][..row_len];
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let src = &row[oy * ow..(oy + 1) * ow];
                    for (ox, &g) in src.iter().enumerate() {
                        let ix = (ox * stride + kj) as isize - padding as isize;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] = dst_row[ix as usize] + g;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Zero-padded 2-d convolution over a `(C, H, W)` map.
pub fn conv2d<T: Scalar>(input: &Tensor<T>, params: &ConvParams<T>) -> Result<Tensor<T>> {
    let (c, h, w) = input.dims3()?;
    if c != params.in_channels() {
        return Err(Error::Shape(format!(
            "conv expects {} input channels, got {c}",
            params.in_channels()
        )));
    }
    let k = params.kernel_side();
    let oh = out_extent(h, k, params.stride, params.padding)?;
    let ow = out_extent(w, k, params.stride, params.padding)?;
    let out_ch = params.out_channels();

    let cols = im2col(input, k, params.stride, params.padding, oh, ow);
    let mut out = Tensor::zeros(&[out_ch, oh, ow]);
    matmul(params.kernel.data(), &cols, out_ch, c * k * k, oh * ow, out.data_mut());
    for (o, plane) in out.data_mut().chunks_exact_mut(oh * ow).enumerate() {
        let b = params.bias.data()[o];
        for v in plane {
            *v = *v + b;
        }
    }
    out.debug_check_finite("conv2d");
    Ok(out)
}

/// Analytic gradients of [`conv2d`]: `(input_grad, kernel_grad, bias_grad)`.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    params: &ConvParams<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (c, h, w) = input.dims3()?;
    let k = params.kernel_side();
    let oh = out_extent(h, k, params.stride, params.padding)?;
    let ow = out_extent(w, k, params.stride, params.padding)?;
    let out_ch = params.out_channels();
    if grad_out.shape() != [out_ch, oh, ow] {
        return Err(Error::Shape(format!(
            "upstream grad shape {:?} does not match conv output [{out_ch}, {oh}, {ow}]",
            grad_out.shape()
        )));
    }

    let mut bias_grad = Tensor::zeros(&[out_ch]);
    for (o, plane) in grad_out.data().chunks_exact(oh * ow).enumerate() {
        bias_grad.data_mut()[o] = plane.iter().copied().sum();
    }

    let cols = im2col(input, k, params.stride, params.padding, oh, ow);
    // kernel_grad = grad_out (out_ch x ohw) * cols^T (ohw x ckk)
    let mut kernel_grad = Tensor::zeros(params.kernel.shape());
    matmul_nt(grad_out.data(), &cols, out_ch, oh * ow, c * k * k, kernel_grad.data_mut());

    // col_grad = kernel^T (ckk x out_ch) * grad_out (out_ch x ohw)
    let mut col_grad = vec![T::zero(); c * k * k * oh * ow];
    matmul_tn(params.kernel.data(), grad_out.data(), c * k * k, out_ch, oh * ow, &mut col_grad);
    let input_grad = col2im(&col_grad, c, h, w, k, params.stride, params.padding, oh, ow);

    Ok((input_grad, kernel_grad, bias_grad))
}
