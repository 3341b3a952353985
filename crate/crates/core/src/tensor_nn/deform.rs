//! Deformable 2D convolution: every kernel tap is displaced by a learned
//! (dx, dy) offset and the input is read through bilinear interpolation.
//!
//! Offsets are shared across input channels: the offset tensor carries
//! `2*k*k` channels, two (dx then dy) per kernel position in row-major
//! (ky, kx) order. A sample landing fully outside the open domain
//! `(-1, W) x (-1, H)` contributes nothing; partially-outside samples use
//! zero-padded neighbors.
//!
//! Coordinate partials use the slope of the bilinear surface; exactly at an
//! interpolation node the surface has a kink and the symmetric subgradient
//! (the discrete central difference of the zero-padded surface) is used.

use super::conv::check_conv_shapes;
use super::tensor::{Tensor, TensorError};
use crate::scalar::Scalar;

/// Up to four (row, col, weight) taps into a 2D map.
#[derive(Clone, Copy, Debug)]
pub struct TapList<S> {
    len: usize,
    items: [(usize, usize, S); 4],
}

impl<S: Scalar> TapList<S> {
    fn new() -> Self {
        Self { len: 0, items: [(0, 0, S::zero()); 4] }
    }

    fn push(&mut self, row: isize, col: isize, w: S, height: usize, width: usize) {
        // Zero-padded neighbors outside the map are dropped.
        if w != S::zero() && row >= 0 && col >= 0 && (row as usize) < height && (col as usize) < width {
            self.items[self.len] = (row as usize, col as usize, w);
            self.len += 1;
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, S)> + '_ {
        self.items[..self.len].iter().copied()
    }

    /// Weighted read from a row-major `height` x `width` map.
    #[inline]
    pub fn eval(&self, map: &[S], width: usize) -> S {
        let mut v = S::zero();
        for &(r, c, w) in &self.items[..self.len] {
            v += w * map[r * width + c];
        }
        v
    }

    /// Weighted scatter into a row-major gradient map.
    #[inline]
    pub fn scatter(&self, grad: &mut [S], width: usize, g: S) {
        for &(r, c, w) in &self.items[..self.len] {
            grad[r * width + c] += g * w;
        }
    }
}

/// One bilinear sample: interpolated value taps plus the taps evaluating the
/// partial derivatives of the value with respect to the sample coordinates.
#[derive(Clone, Copy, Debug)]
pub struct BilinearSample<S> {
    pub value: TapList<S>,
    pub dx: TapList<S>,
    pub dy: TapList<S>,
}

/// Tap structure for sampling `(x, y)` from a `height` x `width` map, or
/// `None` when the sample lies fully outside the padded domain.
pub fn bilinear_taps<S: Scalar>(height: usize, width: usize, x: S, y: S) -> Option<BilinearSample<S>> {
    let neg_one = -S::one();
    if !(x > neg_one && x < S::from_usize(width).unwrap()
        && y > neg_one && y < S::from_usize(height).unwrap())
    {
        return None;
    }
    let x0f = x.floor();
    let y0f = y.floor();
    let lx = x - x0f;
    let ly = y - y0f;
    let x0 = x0f.to_isize().unwrap();
    let y0 = y0f.to_isize().unwrap();
    let one = S::one();
    let half = S::from_f64(0.5).unwrap();

    let mut value = TapList::new();
    value.push(y0, x0, (one - lx) * (one - ly), height, width);
    value.push(y0, x0 + 1, lx * (one - ly), height, width);
    value.push(y0 + 1, x0, (one - lx) * ly, height, width);
    value.push(y0 + 1, x0 + 1, lx * ly, height, width);

    // d/dx: slope between the two columns, blended over rows by ly. At a
    // node (lx == 0) take the symmetric subgradient over columns x0-1, x0+1.
    let mut dx = TapList::new();
    if lx == S::zero() {
        dx.push(y0, x0 + 1, half * (one - ly), height, width);
        dx.push(y0, x0 - 1, -half * (one - ly), height, width);
        dx.push(y0 + 1, x0 + 1, half * ly, height, width);
        dx.push(y0 + 1, x0 - 1, -half * ly, height, width);
    } else {
        dx.push(y0, x0 + 1, one - ly, height, width);
        dx.push(y0, x0, -(one - ly), height, width);
        dx.push(y0 + 1, x0 + 1, ly, height, width);
        dx.push(y0 + 1, x0, -ly, height, width);
    }

    let mut dy = TapList::new();
    if ly == S::zero() {
        dy.push(y0 + 1, x0, half * (one - lx), height, width);
        dy.push(y0 - 1, x0, -half * (one - lx), height, width);
        dy.push(y0 + 1, x0 + 1, half * lx, height, width);
        dy.push(y0 - 1, x0 + 1, -half * lx, height, width);
    } else {
        dy.push(y0 + 1, x0, one - lx, height, width);
        dy.push(y0, x0, -(one - lx), height, width);
        dy.push(y0 + 1, x0 + 1, lx, height, width);
        dy.push(y0, x0 + 1, -lx, height, width);
    }

    Some(BilinearSample { value, dx, dy })
}

/// Sample a rank-2 map at real coordinates: interpolated value, its partials
/// with respect to x and y, and the scatter weights onto the neighbors.
pub fn bilinear_sample<S: Scalar>(map: &Tensor<S>, x: S, y: S) -> (S, S, S, Option<BilinearSample<S>>) {
    assert_eq!(map.shape().len(), 2, "bilinear_sample expects a rank-2 map");
    let (h, w) = (map.shape()[0], map.shape()[1]);
    match bilinear_taps(h, w, x, y) {
        None => (S::zero(), S::zero(), S::zero(), None),
        Some(taps) => {
            let v = taps.value.eval(map.data(), w);
            let dx = taps.dx.eval(map.data(), w);
            let dy = taps.dy.eval(map.data(), w);
            (v, dx, dy, Some(taps))
        }
    }
}

fn check_offsets<S: Scalar>(
    op: &'static str,
    offsets: &Tensor<S>,
    n: usize,
    k: usize,
    h: usize,
    w: usize,
) -> Result<(), TensorError> {
    offsets.expect_shape(op, &[n, 2 * k * k, h, w])
}

/// `out[n,f,y,x] = bias[f] + sum_{c,ky,kx} weight[f,c,ky,kx] *
/// X(n, c, y+ky-r+dy, x+kx-r+dx)` with X read through bilinear interpolation.
///
/// `offsets[n, 2*(ky*k+kx) + 0]` is dx and `... + 1` is dy for that tap.
pub fn deform_conv2d_forward<S: Scalar>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    bias: &Tensor<S>,
    offsets: &Tensor<S>,
) -> Result<Tensor<S>, TensorError> {
    let d = check_conv_shapes("deform_conv2d_forward", input, weight, bias)?;
    check_offsets("deform_conv2d_forward", offsets, d.n, d.k, d.h, d.w)?;

    let mut out = Tensor::zeros(&[d.n, d.f, d.h, d.w]);
    let x = input.data();
    let wt = weight.data();
    let b = bias.data();
    let off = offsets.data();
    let o = out.data_mut();

    let ksq = d.k * d.k;
    let plane = d.h * d.w;
    let mut taps: Vec<Option<BilinearSample<S>>> = vec![None; ksq];
    let mut sampled: Vec<S> = vec![S::zero(); d.c * ksq];

    for n in 0..d.n {
        let in_n = n * d.c * plane;
        let off_n = n * 2 * ksq * plane;
        for y0 in 0..d.h {
            for x0 in 0..d.w {
                let p = y0 * d.w + x0;
                for m in 0..ksq {
                    let (ky, kx) = (m / d.k, m % d.k);
                    let dx = off[off_n + (2 * m) * plane + p];
                    let dy = off[off_n + (2 * m + 1) * plane + p];
                    let sx = S::from_usize(x0).unwrap() + S::from_usize(kx).unwrap()
                        - S::from_usize(d.r).unwrap()
                        + dx;
                    let sy = S::from_usize(y0).unwrap() + S::from_usize(ky).unwrap()
                        - S::from_usize(d.r).unwrap()
                        + dy;
                    taps[m] = bilinear_taps(d.h, d.w, sx, sy);
                }
                for c in 0..d.c {
                    let ch = &x[in_n + c * plane..in_n + (c + 1) * plane];
                    for m in 0..ksq {
                        sampled[c * ksq + m] = match &taps[m] {
                            Some(t) => t.value.eval(ch, d.w),
                            None => S::zero(),
                        };
                    }
                }
                for f in 0..d.f {
                    let w_f = f * d.c * ksq;
                    let mut acc = b[f];
                    for c in 0..d.c {
                        let w_c = w_f + c * ksq;
                        for m in 0..ksq {
                            if taps[m].is_some() {
                                acc += wt[w_c + m] * sampled[c * ksq + m];
                            }
                        }
                    }
                    o[(n * d.f + f) * plane + p] = acc;
                }
            }
        }
    }
    Ok(out)
}

/// Adjoints of [`deform_conv2d_forward`]: gradients for input, weight, bias
/// and offsets, with the offset gradient flowing through the bilinear
/// partials.
pub fn deform_conv2d_backward<S: Scalar>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    offsets: &Tensor<S>,
    upstream: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>, Tensor<S>), TensorError> {
    let bias_probe = Tensor::zeros(&[weight.shape()[0]]);
    let d = check_conv_shapes("deform_conv2d_backward", input, weight, &bias_probe)?;
    check_offsets("deform_conv2d_backward", offsets, d.n, d.k, d.h, d.w)?;
    upstream.expect_shape("deform_conv2d_backward", &[d.n, d.f, d.h, d.w])?;

    let mut gi = Tensor::zeros(input.shape());
    let mut gw = Tensor::zeros(weight.shape());
    let mut gb = Tensor::zeros(&[d.f]);
    let mut go = Tensor::zeros(offsets.shape());

    let x = input.data();
    let wt = weight.data();
    let off = offsets.data();
    let up = upstream.data();

    let ksq = d.k * d.k;
    let plane = d.h * d.w;
    let mut taps: Vec<Option<BilinearSample<S>>> = vec![None; ksq];
    // Upstream-times-weight accumulator per (channel, tap).
    let mut awc: Vec<S> = vec![S::zero(); d.c * ksq];

    {
        let gid = gi.data_mut();
        let gwd = gw.data_mut();
        let gbd = gb.data_mut();
        let god = go.data_mut();
        for n in 0..d.n {
            let in_n = n * d.c * plane;
            let off_n = n * 2 * ksq * plane;
            for y0 in 0..d.h {
                for x0 in 0..d.w {
                    let p = y0 * d.w + x0;
                    for m in 0..ksq {
                        let (ky, kx) = (m / d.k, m % d.k);
                        let dx = off[off_n + (2 * m) * plane + p];
                        let dy = off[off_n + (2 * m + 1) * plane + p];
                        let sx = S::from_usize(x0).unwrap() + S::from_usize(kx).unwrap()
                            - S::from_usize(d.r).unwrap()
                            + dx;
                        let sy = S::from_usize(y0).unwrap() + S::from_usize(ky).unwrap()
                            - S::from_usize(d.r).unwrap()
                            + dy;
                        taps[m] = bilinear_taps(d.h, d.w, sx, sy);
                    }

                    awc.iter_mut().for_each(|v| *v = S::zero());
                    for f in 0..d.f {
                        let g = up[(n * d.f + f) * plane + p];
                        if g == S::zero() {
                            continue;
                        }
                        gbd[f] += g;
                        let w_f = f * d.c * ksq;
                        for c in 0..d.c {
                            let w_c = w_f + c * ksq;
                            for m in 0..ksq {
                                awc[c * ksq + m] += g * wt[w_c + m];
                            }
                        }
                    }

                    for c in 0..d.c {
                        let ch = &x[in_n + c * plane..in_n + (c + 1) * plane];
                        for m in 0..ksq {
                            let t = match &taps[m] {
                                Some(t) => t,
                                None => continue,
                            };
                            let v = t.value.eval(ch, d.w);
                            // Weight gradient needs up * sampled value per filter.
                            for f in 0..d.f {
                                let g = up[(n * d.f + f) * plane + p];
                                if g != S::zero() {
                                    gwd[(f * d.c + c) * ksq + m] += g * v;
                                }
                            }
                            let a = awc[c * ksq + m];
                            if a == S::zero() {
                                continue;
                            }
                            let gch = &mut gid[in_n + c * plane..in_n + (c + 1) * plane];
                            t.value.scatter(gch, d.w, a);
                            god[off_n + (2 * m) * plane + p] += a * t.dx.eval(ch, d.w);
                            god[off_n + (2 * m + 1) * plane + p] += a * t.dy.eval(ch, d.w);
                        }
                    }
                }
            }
        }
    }
    Ok((gi, gw, gb, go))
}

#[cfg(test)]
mod tests {
    use super::super::conv::conv2d_forward;
    use super::*;

    fn map_from(values: &[&[f64]]) -> Tensor<f64> {
        let h = values.len();
        let w = values[0].len();
        let data: Vec<f64> = values.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::from_vec(&[h, w], data).unwrap()
    }

    #[test]
    fn integer_coordinates_return_stored_values() {
        let m = map_from(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0], &[7.0, 8.0, 9.0]]);
        let (v, dx, dy, _) = bilinear_sample(&m, 1.0, 1.0);
        assert_eq!(v, 5.0);
        // Central differences of the stored grid at the node.
        assert_eq!(dx, (6.0 - 4.0) / 2.0);
        assert_eq!(dy, (8.0 - 2.0) / 2.0);
    }

    #[test]
    fn cell_center_averages_four_neighbors() {
        let m = map_from(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let (v, _, _, _) = bilinear_sample(&m, 0.5, 0.5);
        assert_eq!(v, 2.5);
    }

    #[test]
    fn far_outside_sample_is_zero() {
        let m = map_from(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let (v, dx, dy, taps) = bilinear_sample(&m, -10.0, -10.0);
        assert_eq!((v, dx, dy), (0.0, 0.0, 0.0));
        assert!(taps.is_none());
    }

    #[test]
    fn partially_outside_uses_zero_padding() {
        let m = map_from(&[&[8.0, 2.0], &[4.0, 6.0]]);
        // x = -0.5 blends column -1 (padding, 0) and column 0.
        let (v, _, _, _) = bilinear_sample(&m, -0.5, 0.0);
        assert_eq!(v, 4.0);
    }

    #[test]
    fn zero_offsets_reduce_to_standard_convolution() {
        let input =
            Tensor::<f64>::from_vec(&[1, 2, 4, 4], (0..32).map(|v| v as f64 * 0.37 - 3.0).collect())
                .unwrap();
        let weight =
            Tensor::from_vec(&[3, 2, 3, 3], (0..54).map(|v| (v as f64 * 0.11).sin()).collect()).unwrap();
        let bias = Tensor::from_vec(&[3], vec![0.1, -0.2, 0.3]).unwrap();
        let offsets = Tensor::zeros(&[1, 18, 4, 4]);
        let a = conv2d_forward(&input, &weight, &bias).unwrap();
        let b = deform_conv2d_forward(&input, &weight, &bias, &offsets).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn integer_offset_equals_shifted_input_on_interior() {
        // Offset (+1, 0) everywhere samples the input shifted left by one
        // pixel; compare on pixels whose taps stay in bounds for both.
        let (h, w) = (6usize, 6usize);
        let input =
            Tensor::<f64>::from_vec(&[1, 1, h, w], (0..36).map(|v| (v as f64 * 0.7).cos()).collect())
                .unwrap();
        let weight = Tensor::from_vec(&[1, 1, 3, 3], (0..9).map(|v| v as f64 * 0.1 - 0.4).collect()).unwrap();
        let bias = Tensor::from_vec(&[1], vec![0.25]).unwrap();
        let mut offsets = Tensor::zeros(&[1, 18, h, w]);
        for m in 0..9 {
            for p in 0..h * w {
                offsets.data_mut()[(2 * m) * h * w + p] = 1.0; // dx = +1
            }
        }
        let mut shifted = Tensor::zeros(&[1, 1, h, w]);
        for y in 0..h {
            for x in 0..w - 1 {
                shifted.data_mut()[y * w + x] = input.data()[y * w + x + 1];
            }
        }
        let deform = deform_conv2d_forward(&input, &weight, &bias, &offsets).unwrap();
        let standard = conv2d_forward(&shifted, &weight, &bias).unwrap();
        for y in 1..h - 1 {
            for x in 1..w - 3 {
                assert!(
                    (deform.at4(0, 0, y, x) - standard.at4(0, 0, y, x)).abs() < 1e-12,
                    "mismatch at ({y},{x})"
                );
            }
        }
    }

    #[test]
    fn constant_input_ignores_offsets_in_interior() {
        let (h, w) = (8usize, 8usize);
        let input = Tensor::<f64>::filled(&[1, 1, h, w], 2.5);
        let weight = Tensor::from_vec(&[1, 1, 3, 3], (0..9).map(|v| v as f64 * 0.2 - 0.7).collect()).unwrap();
        let bias = Tensor::zeros(&[1]);
        let mut offsets = Tensor::zeros(&[1, 18, h, w]);
        for (i, v) in offsets.data_mut().iter_mut().enumerate() {
            *v = ((i * 37 % 11) as f64 - 5.0) * 0.07; // small, < 1 px
        }
        let zero_off = Tensor::zeros(&[1, 18, h, w]);
        let a = deform_conv2d_forward(&input, &weight, &bias, &offsets).unwrap();
        let b = deform_conv2d_forward(&input, &weight, &bias, &zero_off).unwrap();
        for y in 2..h - 2 {
            for x in 2..w - 2 {
                assert!((a.at4(0, 0, y, x) - b.at4(0, 0, y, x)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_input_has_zero_offset_gradients_in_interior() {
        let (h, w) = (8usize, 8usize);
        let input = Tensor::<f64>::filled(&[1, 1, h, w], 1.0);
        let weight = Tensor::filled(&[1, 1, 3, 3], 0.3);
        let offsets = Tensor::filled(&[1, 18, h, w], 0.21);
        let up = Tensor::filled(&[1, 1, h, w], 1.0);
        let (_, _, _, go) = deform_conv2d_backward(&input, &weight, &offsets, &up).unwrap();
        for ch in 0..18 {
            for y in 2..h - 2 {
                for x in 2..w - 2 {
                    assert_eq!(go.at4(0, ch, y, x), 0.0);
                }
            }
        }
    }

    #[test]
    fn wrong_offset_channel_count_rejected() {
        let input = Tensor::<f32>::zeros(&[1, 1, 4, 4]);
        let weight = Tensor::zeros(&[1, 1, 3, 3]);
        let bias = Tensor::zeros(&[1]);
        let offsets = Tensor::zeros(&[1, 9, 4, 4]);
        assert!(deform_conv2d_forward(&input, &weight, &bias, &offsets).is_err());
    }
}
