//! Dilated/strided 2-D convolution via im2col + GEMM, and the stride-1
//! transposed convolution used by the decoder.

use serde::{Deserialize, Serialize};

use super::params::{Grads, ParamSet};
use super::{gemm, FeatureMap, MatView, Real};

/// Upper bound on im2col buffer elements; larger batches are processed in
/// chunks of whole images.
const COLS_BUDGET: usize = 1 << 22;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub dilation: usize,
    pub stride: usize,
    /// Transposed ("deconvolution") layers store weights as
    /// `[in, out, k, k]`; only stride 1 is supported.
    pub transposed: bool,
}

impl ConvGeometry {
    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize, dilation: usize, stride: usize) -> Self {
        Self { in_channels, out_channels, kernel, dilation, stride, transposed: false }
    }

    pub fn deconv(in_channels: usize, out_channels: usize, kernel: usize, dilation: usize) -> Self {
        Self { in_channels, out_channels, kernel, dilation, stride: 1, transposed: true }
    }

    /// "Same" padding: output side is `ceil(in / stride)`.
    pub fn output_side(&self, input_side: usize) -> usize {
        input_side.div_ceil(self.stride)
    }

    /// Leading padding; any odd remainder goes after (bottom/right).
    pub fn pad_before(&self, input_side: usize) -> usize {
        let out = self.output_side(input_side);
        let span = (self.kernel - 1) * self.dilation + 1;
        ((out - 1) * self.stride + span).saturating_sub(input_side) / 2
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        if self.transposed {
            vec![self.in_channels, self.out_channels, self.kernel, self.kernel]
        } else {
            vec![self.out_channels, self.in_channels, self.kernel, self.kernel]
        }
    }

    pub fn weight_len(&self) -> usize {
        self.in_channels * self.out_channels * self.kernel * self.kernel
    }

    fn rows(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }
}

/// Maps between the `[in, out, k, k]` transposed-conv layout and the
/// equivalent `[out, in, k, k]` correlation kernel (spatially flipped).
/// The map is an involution up to the swapped channel roles.
fn flip_transpose<T: Copy>(src: &[T], first: usize, second: usize, k: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(src.len());
    for j in 0..second {
        for i in 0..first {
            for ky in 0..k {
                for kx in 0..k {
                    out.push(src[((i * second + j) * k + (k - 1 - ky)) * k + (k - 1 - kx)]);
                }
            }
        }
    }
    out
}

struct Plan {
    out_side_h: usize,
    out_side_w: usize,
    pad_y: usize,
    pad_x: usize,
    chunk: usize,
}

fn plan<T: Real>(g: &ConvGeometry, x: &FeatureMap<T>) -> Plan {
    assert_eq!(x.channels, g.in_channels, "convolution input has {} channels, expected {}", x.channels, g.in_channels);
    let oh = g.output_side(x.height);
    let ow = g.output_side(x.width);
    let per_image = g.rows() * oh * ow;
    Plan {
        out_side_h: oh,
        out_side_w: ow,
        pad_y: g.pad_before(x.height),
        pad_x: g.pad_before(x.width),
        chunk: (COLS_BUDGET / per_image.max(1)).clamp(1, x.batch.max(1)),
    }
}

fn im2col<T: Real>(g: &ConvGeometry, x: &FeatureMap<T>, p: &Plan, n0: usize, n1: usize, cols: &mut [T]) {
    let (oh, ow) = (p.out_side_h, p.out_side_w);
    let ncols = (n1 - n0) * oh * ow;
    let k = g.kernel;
    for ci in 0..g.in_channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                let off_y = (ky * g.dilation) as isize - p.pad_y as isize;
                let off_x = (kx * g.dilation) as isize - p.pad_x as isize;
                for n in n0..n1 {
                    for oy in 0..oh {
                        let seg = &mut dst[((n - n0) * oh + oy) * ow..((n - n0) * oh + oy + 1) * ow];
                        let iy = (oy * g.stride) as isize + off_y;
                        if iy < 0 || iy >= x.height as isize {
                            seg.fill(T::zero());
                            continue;
                        }
                        let base = x.index(ci, n, iy as usize, 0);
                        let src = &x.data[base..base + x.width];
                        if g.stride == 1 {
                            let lo = (-off_x).clamp(0, ow as isize) as usize;
                            let hi = (x.width as isize - off_x).clamp(lo as isize, ow as isize) as usize;
                            seg[..lo].fill(T::zero());
                            seg[hi..].fill(T::zero());
                            if hi > lo {
                                let s0 = (lo as isize + off_x) as usize;
                                seg[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                            }
                        } else {
                            for (ox, v) in seg.iter_mut().enumerate() {
                                let ix = (ox * g.stride) as isize + off_x;
                                *v = if ix >= 0 && ix < x.width as isize { src[ix as usize] } else { T::zero() };
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(g: &ConvGeometry, dx: &mut FeatureMap<T>, p: &Plan, n0: usize, n1: usize, cols: &[T]) {
    let (oh, ow) = (p.out_side_h, p.out_side_w);
    let ncols = (n1 - n0) * oh * ow;
    let k = g.kernel;
    let (height, width) = (dx.height, dx.width);
    for ci in 0..g.in_channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                let off_y = (ky * g.dilation) as isize - p.pad_y as isize;
                let off_x = (kx * g.dilation) as isize - p.pad_x as isize;
                for n in n0..n1 {
                    for oy in 0..oh {
                        let iy = (oy * g.stride) as isize + off_y;
                        if iy < 0 || iy >= height as isize {
                            continue;
                        }
                        let seg = &src[((n - n0) * oh + oy) * ow..((n - n0) * oh + oy + 1) * ow];
                        let base = dx.index(ci, n, iy as usize, 0);
                        let dst = &mut dx.data[base..base + width];
                        for (ox, &v) in seg.iter().enumerate() {
                            let ix = (ox * g.stride) as isize + off_x;
                            if ix >= 0 && ix < width as isize {
                                dst[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Correlation with an `[out, in, k, k]` kernel plus per-channel bias.
pub fn conv_forward<T: Real>(g: &ConvGeometry, x: &FeatureMap<T>, kernel: &[T], bias: &[T]) -> FeatureMap<T> {
    let p = plan(g, x);
    let mut y = FeatureMap::zeros(g.out_channels, x.batch, p.out_side_h, p.out_side_w);
    let rows = g.rows();
    let plane = p.out_side_h * p.out_side_w;
    let total_cols = x.batch * plane;
    let mut cols = vec![T::zero(); rows * p.chunk * plane];
    let mut n0 = 0;
    while n0 < x.batch {
        let n1 = (n0 + p.chunk).min(x.batch);
        let ncols = (n1 - n0) * plane;
        im2col(g, x, &p, n0, n1, &mut cols);
        gemm(
            T::one(),
            kernel,
            MatView::row_major(0, g.out_channels, rows, rows),
            &cols,
            MatView::row_major(0, rows, ncols, ncols),
            T::zero(),
            &mut y.data,
            MatView::row_major(n0 * plane, g.out_channels, ncols, total_cols),
        );
        n0 = n1;
    }
    for (c, &b) in bias.iter().enumerate() {
        if b != T::zero() {
            y.data[c * total_cols..(c + 1) * total_cols].iter_mut().for_each(|v| *v += b);
        }
    }
    y
}

/// Gradients of [`conv_forward`]: accumulates into `dkernel`/`dbias` and
/// returns the input gradient when requested.
pub fn conv_backward<T: Real>(
    g: &ConvGeometry,
    x: &FeatureMap<T>,
    kernel: &[T],
    dy: &FeatureMap<T>,
    dkernel: &mut [T],
    dbias: &mut [T],
    need_input_grad: bool,
) -> Option<FeatureMap<T>> {
    let p = plan(g, x);
    let rows = g.rows();
    let plane = p.out_side_h * p.out_side_w;
    let total_cols = x.batch * plane;
    for (c, db) in dbias.iter_mut().enumerate() {
        *db += dy.data[c * total_cols..(c + 1) * total_cols].iter().copied().sum::<T>();
    }
    let mut dx = need_input_grad.then(|| FeatureMap::zeros(x.channels, x.batch, x.height, x.width));
    let mut cols = vec![T::zero(); rows * p.chunk * plane];
    let mut n0 = 0;
    while n0 < x.batch {
        let n1 = (n0 + p.chunk).min(x.batch);
        let ncols = (n1 - n0) * plane;
        let dy_view = MatView::row_major(n0 * plane, g.out_channels, ncols, total_cols);
        im2col(g, x, &p, n0, n1, &mut cols);
        gemm(
            T::one(),
            &dy.data,
            dy_view,
            &cols,
            MatView::row_major(0, rows, ncols, ncols).transposed(),
            T::one(),
            dkernel,
            MatView::row_major(0, g.out_channels, rows, rows),
        );
        if let Some(dx) = dx.as_mut() {
            gemm(
                T::one(),
                kernel,
                MatView::row_major(0, g.out_channels, rows, rows).transposed(),
                &dy.data,
                dy_view,
                T::zero(),
                &mut cols,
                MatView::row_major(0, rows, ncols, ncols),
            );
            col2im(g, dx, &p, n0, n1, &cols);
        }
        n0 = n1;
    }
    dx
}

/// A convolution layer bound to its weight and bias parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv {
    pub geometry: ConvGeometry,
    pub weight: usize,
    pub bias: usize,
}

impl Conv {
    fn kernel<T: Real>(&self, params: &ParamSet<T>) -> Vec<T> {
        let g = &self.geometry;
        let w = &params.get(self.weight).value;
        if g.transposed {
            flip_transpose(w, g.in_channels, g.out_channels, g.kernel)
        } else {
            w.clone()
        }
    }

    pub fn forward<T: Real>(&self, params: &ParamSet<T>, x: &FeatureMap<T>) -> FeatureMap<T> {
        conv_forward(&self.geometry, x, &self.kernel(params), &params.get(self.bias).value)
    }

    pub fn backward<T: Real>(
        &self,
        params: &ParamSet<T>,
        x: &FeatureMap<T>,
        dy: &FeatureMap<T>,
        grads: &mut Grads<T>,
        need_input_grad: bool,
    ) -> Option<FeatureMap<T>> {
        let g = &self.geometry;
        let kernel = self.kernel(params);
        let mut dkernel = vec![T::zero(); g.weight_len()];
        let dx = conv_backward(g, x, &kernel, dy, &mut dkernel, grads.get_mut(self.bias), need_input_grad);
        let dkernel = if g.transposed {
            flip_transpose(&dkernel, g.out_channels, g.in_channels, g.kernel)
        } else {
            dkernel
        };
        grads.get_mut(self.weight).iter_mut().zip(&dkernel).for_each(|(a, &b)| *a += b);
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn random_map(c: usize, n: usize, h: usize, w: usize, rng: &mut impl Rng) -> FeatureMap<f64> {
        let mut m = FeatureMap::zeros(c, n, h, w);
        m.data.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        m
    }

    /// Direct definition of a zero-padded dilated, strided correlation.
    fn naive_conv(g: &ConvGeometry, x: &FeatureMap<f64>, k: &[f64], b: &[f64]) -> FeatureMap<f64> {
        let oh = g.output_side(x.height);
        let ow = g.output_side(x.width);
        let (py, px) = (g.pad_before(x.height) as isize, g.pad_before(x.width) as isize);
        let mut y = FeatureMap::zeros(g.out_channels, x.batch, oh, ow);
        for o in 0..g.out_channels {
            for n in 0..x.batch {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b[o];
                        for i in 0..g.in_channels {
                            for ky in 0..g.kernel {
                                for kx in 0..g.kernel {
                                    let iy = (oy * g.stride + ky * g.dilation) as isize - py;
                                    let ix = (ox * g.stride + kx * g.dilation) as isize - px;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < x.height && (ix as usize) < x.width {
                                        acc += k[((o * g.in_channels + i) * g.kernel + ky) * g.kernel + kx]
                                            * x.data[x.index(i, n, iy as usize, ix as usize)];
                                    }
                                }
                            }
                        }
                        let idx = y.index(o, n, oy, ox);
                        y.data[idx] = acc;
                    }
                }
            }
        }
        y
    }

    /// Direct definition of a stride-1 transposed convolution with "same"
    /// cropping: every input pixel scatters its weighted kernel.
    fn naive_deconv(g: &ConvGeometry, x: &FeatureMap<f64>, w: &[f64], b: &[f64]) -> FeatureMap<f64> {
        let pad = ((g.kernel - 1) * g.dilation / 2) as isize;
        let mut y = FeatureMap::zeros(g.out_channels, x.batch, x.height, x.width);
        for n in 0..x.batch {
            for o in 0..g.out_channels {
                for yy in 0..x.height {
                    for xx in 0..x.width {
                        let idx = y.index(o, n, yy, xx);
                        y.data[idx] = b[o];
                    }
                }
            }
            for i in 0..g.in_channels {
                for iy in 0..x.height {
                    for ix in 0..x.width {
                        let v = x.data[x.index(i, n, iy, ix)];
                        for o in 0..g.out_channels {
                            for ky in 0..g.kernel {
                                for kx in 0..g.kernel {
                                    let oy = iy as isize + (ky * g.dilation) as isize - pad;
                                    let ox = ix as isize + (kx * g.dilation) as isize - pad;
                                    if oy >= 0 && ox >= 0 && (oy as usize) < x.height && (ox as usize) < x.width {
                                        let idx = y.index(o, n, oy as usize, ox as usize);
                                        y.data[idx] += v * w[((i * g.out_channels + o) * g.kernel + ky) * g.kernel + kx];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        y
    }

    #[test]
    fn padding_arithmetic() {
        let c = ConvGeometry::conv(1, 1, 5, 1, 2);
        assert_eq!(c.output_side(128), 64);
        assert_eq!(c.pad_before(128), 1);
        assert_eq!(c.output_side(1), 1);
        let d = ConvGeometry::conv(1, 1, 5, 5, 1);
        assert_eq!(d.pad_before(16), 10);
    }

    #[test]
    fn forward_matches_naive_for_dilations_and_strides() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for (dil, stride, side) in [(1, 1, 7), (2, 1, 6), (5, 1, 5), (1, 2, 8), (1, 2, 5)] {
            let g = ConvGeometry::conv(3, 4, 5, dil, stride);
            let x = random_map(3, 2, side, side, &mut rng);
            let k: Vec<f64> = (0..g.weight_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let got = conv_forward(&g, &x, &k, &b);
            let want = naive_conv(&g, &x, &k, &b);
            for (a, e) in got.data.iter().zip(&want.data) {
                assert!((a - e).abs() < 1e-12, "dil {dil} stride {stride}");
            }
        }
    }

    #[test]
    fn transposed_layer_matches_scatter_definition() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        for dil in [1, 2, 5] {
            let g = ConvGeometry::deconv(3, 2, 5, dil);
            let mut params = ParamSet::<f64>::default();
            let weight = params.push_weight("w", g.weight_shape(), &mut rng, 1.0);
            let bias = params.push_bias("b", g.out_channels);
            params.get_mut(bias).value.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
            let layer = Conv { geometry: g, weight, bias };
            let x = random_map(3, 2, 6, 6, &mut rng);
            let got = layer.forward(&params, &x);
            let want = naive_deconv(&g, &x, &params.get(weight).value, &params.get(bias).value);
            for (a, e) in got.data.iter().zip(&want.data) {
                assert!((a - e).abs() < 1e-12, "dilation {dil}");
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for g in [ConvGeometry::conv(2, 3, 5, 2, 1), ConvGeometry::conv(2, 3, 5, 1, 2), ConvGeometry::deconv(2, 3, 3, 1)] {
            let mut params = ParamSet::<f64>::default();
            let weight = params.push_weight("w", g.weight_shape(), &mut rng, 1.0);
            let bias = params.push_bias("b", g.out_channels);
            let layer = Conv { geometry: g, weight, bias };
            let x = random_map(2, 2, 6, 6, &mut rng);
            let y = layer.forward(&params, &x);
            // Loss = Σ r ⊙ y for a fixed random r, so dL/dy = r.
            let r = random_map(y.channels, y.batch, y.height, y.width, &mut rng);
            let loss = |p: &ParamSet<f64>, x: &FeatureMap<f64>| -> f64 {
                layer.forward(p, x).data.iter().zip(&r.data).map(|(a, b)| a * b).sum()
            };
            let mut grads = params.zero_grads();
            let dx = layer.backward(&params, &x, &r, &mut grads, true).unwrap();
            let h = 1e-6;
            for idx in [0, 5, g.weight_len() - 1] {
                let mut p = params.clone();
                p.get_mut(weight).value[idx] += h;
                let up = loss(&p, &x);
                p.get_mut(weight).value[idx] -= 2.0 * h;
                let down = loss(&p, &x);
                assert!(((up - down) / (2.0 * h) - grads.get(weight)[idx]).abs() < 1e-6);
            }
            for idx in [0, 17, x.data.len() - 1] {
                let mut xp = x.clone();
                xp.data[idx] += h;
                let up = loss(&params, &xp);
                xp.data[idx] -= 2.0 * h;
                let down = loss(&params, &xp);
                assert!(((up - down) / (2.0 * h) - dx.data[idx]).abs() < 1e-6);
            }
            let bias_sum: f64 = (0..r.channel_len()).map(|i| r.data[i]).sum();
            assert!((grads.get(bias)[0] - bias_sum).abs() < 1e-9);
        }
    }
}
