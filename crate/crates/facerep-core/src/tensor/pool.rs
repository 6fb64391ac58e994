use alloc::format;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    Max,
    Average,
}

fn check_geometry(h: usize, w: usize, window: usize, stride: usize) -> Result<(usize, usize)> {
    if window == 0 || stride == 0 {
        return Err(Error::Argument("pool window and stride must be positive".into()));
    }
    if window > h || window > w {
        return Err(Error::Shape(format!(
            "pool window {window} exceeds spatial extent {h}x{w}"
        )));
    }
    // Floor semantics: windows that would overrun are dropped.
    Ok(((h - window) / stride + 1, (w - window) / stride + 1))
}

/// Max or average pooling over a `(C, H, W)` map.
pub fn pool2d<T: Scalar>(
    input: &Tensor<T>,
    mode: PoolMode,
    window: usize,
    stride: usize,
) -> Result<Tensor<T>> {
    let (c, h, w) = input.dims3()?;
    let (oh, ow) = check_geometry(h, w, window, stride)?;
    let mut out = Tensor::zeros(&[c, oh, ow]);
    let norm = T::from_f64(1.0 / (window * window) as f64);
    for ci in 0..c {
        let plane = &input.data()[ci * h * w..(ci + 1) * h * w];
        let out_plane = &mut out.data_mut()[ci * oh * ow..(ci + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let (y0, x0) = (oy * stride, ox * stride);
                let cell = match mode {
                    PoolMode::Max => {
                        let mut best = plane[y0 * w + x0];
                        for dy in 0..window {
                            for dx in 0..window {
                                let v = plane[(y0 + dy) * w + x0 + dx];
                                if v > best {
                                    best = v;
                                }
                            }
                        }
                        best
                    }
                    PoolMode::Average => {
                        let mut acc = T::zero();
                        for dy in 0..window {
                            for dx in 0..window {
                                acc = acc + plane[(y0 + dy) * w + x0 + dx];
                            }
                        }
                        acc * norm
                    }
                };
                out_plane[oy * ow + ox] = cell;
            }
        }
    }
    out.debug_check_finite("pool2d");
    Ok(out)
}

/// Gradient of [`pool2d`]. Max routes to the argmax with first-index
/// tie-break (row-major scan, strict improvement); average distributes
/// uniformly over the window.
pub fn pool2d_backward<T: Scalar>(
    input: &Tensor<T>,
    mode: PoolMode,
    window: usize,
    stride: usize,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (c, h, w) = input.dims3()?;
    let (oh, ow) = check_geometry(h, w, window, stride)?;
    if grad_out.shape() != [c, oh, ow] {
        return Err(Error::Shape(format!(
            "upstream grad shape {:?} does not match pool output [{c}, {oh}, {ow}]",
            grad_out.shape()
        )));
    }
    let mut grad_in = Tensor::zeros(&[c, h, w]);
    let norm = T::from_f64(1.0 / (window * window) as f64);
    for ci in 0..c {
        let plane = &input.data()[ci * h * w..(ci + 1) * h * w];
        let g_plane = &grad_out.data()[ci * oh * ow..(ci + 1) * oh * ow];
        let gi_plane = &mut grad_in.data_mut()[ci * h * w..(ci + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let g = g_plane[oy * ow + ox];
                let (y0, x0) = (oy * stride, ox * stride);
                match mode {
                    PoolMode::Max => {
                        let mut best_idx = y0 * w + x0;
                        let mut best = plane[best_idx];
                        for dy in 0..window {
                            for dx in 0..window {
                                let idx = (y0 + dy) * w + x0 + dx;
                                if plane[idx] > best {
                                    best = plane[idx];
                                    best_idx = idx;
                                }
                            }
                        }
                        gi_plane[best_idx] = gi_plane[best_idx] + g;
                    }
                    PoolMode::Average => {
                        let share = g * norm;
                        for dy in 0..window {
                            for dx in 0..window {
                                let idx = (y0 + dy) * w + x0 + dx;
                                gi_plane[idx] = gi_plane[idx] + share;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(grad_in)
}
