//! Pooling, transposed convolution, activations and dense layers.

use super::tensor::{Tensor, TensorError};
use crate::scalar::Scalar;

/// 2x2 max-pool, stride 2. Returns the pooled map and the flat input index
/// of each selected element (ties go to the first index in row-major order).
pub fn maxpool2x2_forward<S: Scalar>(input: &Tensor<S>) -> Result<(Tensor<S>, Vec<u32>), TensorError> {
    input.expect_rank("maxpool2x2_forward", 4)?;
    let (n, c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2], input.shape()[3]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(TensorError::Invalid {
            op: "maxpool2x2_forward",
            msg: format!("spatial dims {h}x{w} must be even"),
        });
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let mut argmax = vec![0u32; n * c * oh * ow];
    let x = input.data();
    let o = out.data_mut();
    for nc in 0..n * c {
        let in_base = nc * h * w;
        let out_base = nc * oh * ow;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = in_base + (2 * oy) * w + 2 * ox;
                let mut best = x[best_idx];
                for (dy, dx) in [(0usize, 1usize), (1, 0), (1, 1)] {
                    let idx = in_base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > best {
                        best = x[idx];
                        best_idx = idx;
                    }
                }
                o[out_base + oy * ow + ox] = best;
                argmax[out_base + oy * ow + ox] = best_idx as u32;
            }
        }
    }
    Ok((out, argmax))
}

/// Routes each upstream element to the input position that won the max.
pub fn maxpool2x2_backward<S: Scalar>(
    input_shape: &[usize],
    argmax: &[u32],
    upstream: &Tensor<S>,
) -> Result<Tensor<S>, TensorError> {
    if upstream.len() != argmax.len() {
        return Err(TensorError::Invalid {
            op: "maxpool2x2_backward",
            msg: format!("argmax length {} vs upstream {}", argmax.len(), upstream.len()),
        });
    }
    let mut gi = Tensor::zeros(input_shape);
    let g = gi.data_mut();
    for (i, &src) in argmax.iter().enumerate() {
        g[src as usize] += upstream.data()[i];
    }
    Ok(gi)
}

/// Transposed convolution with a 2x2 kernel and stride 2: doubles spatial
/// dims. Weight layout is `[C_in, F_out, 2, 2]`. Every output pixel receives
/// exactly one input pixel, so
/// `out[n,f,oy,ox] = bias[f] + sum_c input[n,c,oy/2,ox/2] * w[c,f,oy%2,ox%2]`.
pub fn transposed_conv2d_forward<S: Scalar>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    bias: &Tensor<S>,
) -> Result<Tensor<S>, TensorError> {
    input.expect_rank("transposed_conv2d_forward", 4)?;
    weight.expect_rank("transposed_conv2d_forward", 4)?;
    let (n, c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2], input.shape()[3]);
    let f = weight.shape()[1];
    weight.expect_shape("transposed_conv2d_forward", &[c, f, 2, 2])?;
    bias.expect_shape("transposed_conv2d_forward", &[f])?;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Tensor::zeros(&[n, f, oh, ow]);
    let x = input.data();
    let wt = weight.data();
    let b = bias.data();
    let o = out.data_mut();
    for nn in 0..n {
        for ff in 0..f {
            let out_base = (nn * f + ff) * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let (iy, ky) = (oy / 2, oy % 2);
                    let (ix, kx) = (ox / 2, ox % 2);
                    let mut acc = b[ff];
                    for cc in 0..c {
                        acc += x[((nn * c + cc) * h + iy) * w + ix]
                            * wt[((cc * f + ff) * 2 + ky) * 2 + kx];
                    }
                    o[out_base + oy * ow + ox] = acc;
                }
            }
        }
    }
    Ok(out)
}

/// Adjoints of [`transposed_conv2d_forward`].
pub fn transposed_conv2d_backward<S: Scalar>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    upstream: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>), TensorError> {
    let (n, c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2], input.shape()[3]);
    let f = weight.shape()[1];
    upstream.expect_shape("transposed_conv2d_backward", &[n, f, 2 * h, 2 * w])?;
    let mut gi = Tensor::zeros(input.shape());
    let mut gw = Tensor::zeros(weight.shape());
    let mut gb = Tensor::zeros(&[f]);
    let x = input.data();
    let wt = weight.data();
    let up = upstream.data();
    let (oh, ow) = (2 * h, 2 * w);
    {
        let gid = gi.data_mut();
        let gwd = gw.data_mut();
        let gbd = gb.data_mut();
        for nn in 0..n {
            for ff in 0..f {
                let up_base = (nn * f + ff) * oh * ow;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let g = up[up_base + oy * ow + ox];
                        gbd[ff] += g;
                        if g == S::zero() {
                            continue;
                        }
                        let (iy, ky) = (oy / 2, oy % 2);
                        let (ix, kx) = (ox / 2, ox % 2);
                        for cc in 0..c {
                            let xi = ((nn * c + cc) * h + iy) * w + ix;
                            let wi = ((cc * f + ff) * 2 + ky) * 2 + kx;
                            gid[xi] += g * wt[wi];
                            gwd[wi] += g * x[xi];
                        }
                    }
                }
            }
        }
    }
    Ok((gi, gw, gb))
}

pub fn relu_forward<S: Scalar>(input: &Tensor<S>) -> Tensor<S> {
    input.map(|v| if v > S::zero() { v } else { S::zero() })
}

/// Derivative is 1 for strictly positive pre-activations, 0 otherwise.
pub fn relu_backward<S: Scalar>(input: &Tensor<S>, upstream: &Tensor<S>) -> Tensor<S> {
    assert_eq!(input.shape(), upstream.shape(), "relu_backward shape mismatch");
    let mut g = Tensor::zeros(input.shape());
    for ((o, &x), &u) in g.data_mut().iter_mut().zip(input.data()).zip(upstream.data()) {
        *o = if x > S::zero() { u } else { S::zero() };
    }
    g
}

pub fn sigmoid_forward<S: Scalar>(input: &Tensor<S>) -> Tensor<S> {
    input.map(|v| S::one() / (S::one() + (-v).exp()))
}

/// Takes the forward *output* (not the pre-activation).
pub fn sigmoid_backward<S: Scalar>(output: &Tensor<S>, upstream: &Tensor<S>) -> Tensor<S> {
    assert_eq!(output.shape(), upstream.shape(), "sigmoid_backward shape mismatch");
    let mut g = Tensor::zeros(output.shape());
    for ((o, &s), &u) in g.data_mut().iter_mut().zip(output.data()).zip(upstream.data()) {
        *o = u * s * (S::one() - s);
    }
    g
}

/// `out[b,o] = bias[o] + dot(weight[o,:], input[b,:])`.
pub fn dense_forward<S: Scalar>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    bias: &Tensor<S>,
) -> Result<Tensor<S>, TensorError> {
    input.expect_rank("dense_forward", 2)?;
    weight.expect_rank("dense_forward", 2)?;
    let (bsz, i) = (input.shape()[0], input.shape()[1]);
    let o = weight.shape()[0];
    weight.expect_shape("dense_forward", &[o, i])?;
    bias.expect_shape("dense_forward", &[o])?;
    let mut out = Tensor::zeros(&[bsz, o]);
    let od = out.data_mut();
    for b in 0..bsz {
        let xrow = &input.data()[b * i..(b + 1) * i];
        for oo in 0..o {
            let wrow = &weight.data()[oo * i..(oo + 1) * i];
            let mut acc = bias.data()[oo];
            for (wv, xv) in wrow.iter().zip(xrow.iter()) {
                acc += *wv * *xv;
            }
            od[b * o + oo] = acc;
        }
    }
    Ok(out)
}

/// Adjoints of [`dense_forward`].
pub fn dense_backward<S: Scalar>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    upstream: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>), TensorError> {
    let (bsz, i) = (input.shape()[0], input.shape()[1]);
    let o = weight.shape()[0];
    upstream.expect_shape("dense_backward", &[bsz, o])?;
    let mut gi = Tensor::zeros(&[bsz, i]);
    let mut gw = Tensor::zeros(&[o, i]);
    let mut gb = Tensor::zeros(&[o]);
    {
        let gid = gi.data_mut();
        let gwd = gw.data_mut();
        let gbd = gb.data_mut();
        for b in 0..bsz {
            let xrow = &input.data()[b * i..(b + 1) * i];
            for oo in 0..o {
                let g = upstream.data()[b * o + oo];
                gbd[oo] += g;
                if g == S::zero() {
                    continue;
                }
                let wrow = &weight.data()[oo * i..(oo + 1) * i];
                for idx in 0..i {
                    gid[b * i + idx] += g * wrow[idx];
                    gwd[oo * i + idx] += g * xrow[idx];
                }
            }
        }
    }
    Ok((gi, gw, gb))
}
