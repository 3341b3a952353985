//! Standard 2D convolution, stride 1, odd square kernel, zero padding that
//! preserves spatial dims.
//!
//! The per-output-element reduction order is fixed to (channel, ky, kx) with
//! out-of-bounds taps skipped. The deformable kernel accumulates in the same
//! order, so the two match bit-for-bit when all offsets are zero.

use super::tensor::{Tensor, TensorError};
use crate::scalar::Scalar;

pub(super) struct ConvDims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub k: usize,
    pub r: usize,
}

pub(super) fn check_conv_shapes<S: Scalar>(
    op: &'static str,
    input: &Tensor<S>,
    weight: &Tensor<S>,
    bias: &Tensor<S>,
) -> Result<ConvDims, TensorError> {
    input.expect_rank(op, 4)?;
    weight.expect_rank(op, 4)?;
    let (n, c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2], input.shape()[3]);
    let (f, wc, kh, kw) = (weight.shape()[0], weight.shape()[1], weight.shape()[2], weight.shape()[3]);
    if wc != c || kh != kw {
        return Err(TensorError::ShapeMismatch {
            op,
            expected: vec![f, c, kh, kh],
            got: weight.shape().to_vec(),
        });
    }
    if kh % 2 == 0 {
        return Err(TensorError::Invalid { op, msg: format!("kernel size {kh} must be odd") });
    }
    bias.expect_shape(op, &[f])?;
    Ok(ConvDims { n, c, h, w, f, k: kh, r: (kh - 1) / 2 })
}

/// `out[n,f,y,x] = bias[f] + sum_{c,ky,kx} weight[f,c,ky,kx] * input[n,c,y+ky-r,x+kx-r]`
/// with zero padding outside the image.
pub fn conv2d_forward<S: Scalar>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    bias: &Tensor<S>,
) -> Result<Tensor<S>, TensorError> {
    let d = check_conv_shapes("conv2d_forward", input, weight, bias)?;
    let mut out = Tensor::zeros(&[d.n, d.f, d.h, d.w]);
    let x = input.data();
    let wt = weight.data();
    let b = bias.data();
    let o = out.data_mut();

    let ksq = d.k * d.k;
    for n in 0..d.n {
        let in_n = n * d.c * d.h * d.w;
        for f in 0..d.f {
            let w_f = f * d.c * ksq;
            let out_f = (n * d.f + f) * d.h * d.w;
            for y0 in 0..d.h {
                for x0 in 0..d.w {
                    let mut acc = b[f];
                    for c in 0..d.c {
                        let in_c = in_n + c * d.h * d.w;
                        let w_c = w_f + c * ksq;
                        for ky in 0..d.k {
                            let iy = y0 as isize + ky as isize - d.r as isize;
                            if iy < 0 || iy >= d.h as isize {
                                continue;
                            }
                            let in_row = in_c + iy as usize * d.w;
                            let w_row = w_c + ky * d.k;
                            for kx in 0..d.k {
                                let ix = x0 as isize + kx as isize - d.r as isize;
                                if ix < 0 || ix >= d.w as isize {
                                    continue;
                                }
                                acc += wt[w_row + kx] * x[in_row + ix as usize];
                            }
                        }
                    }
                    o[out_f + y0 * d.w + x0] = acc;
                }
            }
        }
    }
    Ok(out)
}

/// Adjoints of [`conv2d_forward`]: gradients for input, weight and bias given
/// the upstream gradient of the output.
pub fn conv2d_backward<S: Scalar>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    upstream: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>), TensorError> {
    let bias_probe = Tensor::zeros(&[weight.shape()[0]]);
    let d = check_conv_shapes("conv2d_backward", input, weight, &bias_probe)?;
    upstream.expect_shape("conv2d_backward", &[d.n, d.f, d.h, d.w])?;

    let mut gi = Tensor::zeros(input.shape());
    let mut gw = Tensor::zeros(weight.shape());
    let mut gb = Tensor::zeros(&[d.f]);
    let x = input.data();
    let wt = weight.data();
    let up = upstream.data();

    let ksq = d.k * d.k;
    {
        let gid = gi.data_mut();
        let gwd = gw.data_mut();
        let gbd = gb.data_mut();
        for n in 0..d.n {
            let in_n = n * d.c * d.h * d.w;
            for f in 0..d.f {
                let w_f = f * d.c * ksq;
                let up_f = (n * d.f + f) * d.h * d.w;
                for y0 in 0..d.h {
                    for x0 in 0..d.w {
                        let g = up[up_f + y0 * d.w + x0];
                        gbd[f] += g;
                        for c in 0..d.c {
                            let in_c = in_n + c * d.h * d.w;
                            let w_c = w_f + c * ksq;
                            for ky in 0..d.k {
                                let iy = y0 as isize + ky as isize - d.r as isize;
                                if iy < 0 || iy >= d.h as isize {
                                    continue;
                                }
                                let in_row = in_c + iy as usize * d.w;
                                let w_row = w_c + ky * d.k;
                                for kx in 0..d.k {
                                    let ix = x0 as isize + kx as isize - d.r as isize;
                                    if ix < 0 || ix >= d.w as isize {
                                        continue;
                                    }
                                    let xi = in_row + ix as usize;
                                    gwd[w_row + kx] += g * x[xi];
                                    gid[xi] += g * wt[w_row + kx];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((gi, gw, gb))
}
