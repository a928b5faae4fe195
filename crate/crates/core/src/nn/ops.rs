//! Element-wise activations, pooling, upsampling and the dense head.

use super::{FeatureMap, Real};

pub fn elu<T: Real>(x: &mut FeatureMap<T>) {
    x.data.iter_mut().for_each(|v| {
        if *v <= T::zero() {
            *v = v.exp_m1();
        }
    });
}

/// Backward of ELU(α=1) given its *output* `y`: dy/dx = 1 for x > 0,
/// y + 1 otherwise.
pub fn elu_backward<T: Real>(y: &FeatureMap<T>, dy: &mut FeatureMap<T>) {
    dy.data.iter_mut().zip(&y.data).for_each(|(g, &y)| {
        if y <= T::zero() {
            *g *= y + T::one();
        }
    });
}

pub fn leaky_relu<T: Real>(x: &mut FeatureMap<T>, slope: T) {
    x.data.iter_mut().for_each(|v| {
        if *v < T::zero() {
            *v *= slope;
        }
    });
}

/// Backward of leaky ReLU given its output (sign is preserved for slope > 0).
pub fn leaky_relu_backward<T: Real>(y: &FeatureMap<T>, dy: &mut FeatureMap<T>, slope: T) {
    dy.data.iter_mut().zip(&y.data).for_each(|(g, &y)| {
        if y < T::zero() {
            *g *= slope;
        }
    });
}

/// 0 below −2.5, 0.2x + 0.5 on [−2.5, 2.5], 1 above 2.5.
pub fn hard_sigmoid<T: Real>(x: T) -> T {
    let bound = T::of(2.5);
    if x < -bound {
        T::zero()
    } else if x > bound {
        T::one()
    } else {
        T::of(0.2) * x + T::of(0.5)
    }
}

pub fn hard_sigmoid_grad<T: Real>(x: T) -> T {
    let bound = T::of(2.5);
    if x < -bound || x > bound {
        T::zero()
    } else {
        T::of(0.2)
    }
}

/// 2×2 max pooling with stride 2; returns the output and, per output cell,
/// the flat index of the selected input.
pub fn max_pool2<T: Real>(x: &FeatureMap<T>) -> (FeatureMap<T>, Vec<usize>) {
    let (oh, ow) = (x.height / 2, x.width / 2);
    let mut y = FeatureMap::zeros(x.channels, x.batch, oh, ow);
    let mut argmax = vec![0usize; y.data.len()];
    for c in 0..x.channels {
        for n in 0..x.batch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = x.index(c, n, 2 * oy, 2 * ox);
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = x.index(c, n, 2 * oy + dy, 2 * ox + dx);
                        if x.data[i] > x.data[best] {
                            best = i;
                        }
                    }
                    let o = y.index(c, n, oy, ox);
                    y.data[o] = x.data[best];
                    argmax[o] = best;
                }
            }
        }
    }
    (y, argmax)
}

pub fn max_pool2_backward<T: Real>(input: &FeatureMap<T>, argmax: &[usize], dy: &FeatureMap<T>) -> FeatureMap<T> {
    let mut dx = FeatureMap::zeros(input.channels, input.batch, input.height, input.width);
    for (&i, &g) in argmax.iter().zip(&dy.data) {
        dx.data[i] += g;
    }
    dx
}

/// Nearest-neighbour 2× upsampling.
pub fn upsample2<T: Real>(x: &FeatureMap<T>) -> FeatureMap<T> {
    let mut y = FeatureMap::zeros(x.channels, x.batch, x.height * 2, x.width * 2);
    for c in 0..x.channels {
        for n in 0..x.batch {
            for yy in 0..y.height {
                for xx in 0..y.width {
                    let o = y.index(c, n, yy, xx);
                    y.data[o] = x.data[x.index(c, n, yy / 2, xx / 2)];
                }
            }
        }
    }
    y
}

pub fn upsample2_backward<T: Real>(dy: &FeatureMap<T>) -> FeatureMap<T> {
    let mut dx = FeatureMap::zeros(dy.channels, dy.batch, dy.height / 2, dy.width / 2);
    for c in 0..dy.channels {
        for n in 0..dy.batch {
            for yy in 0..dy.height {
                for xx in 0..dy.width {
                    let i = dx.index(c, n, yy / 2, xx / 2);
                    dx.data[i] += dy.data[dy.index(c, n, yy, xx)];
                }
            }
        }
    }
    dx
}

/// Single-output dense layer over the per-sample flattening `(c, y, x)`.
pub fn dense_scalar<T: Real>(x: &FeatureMap<T>, weight: &[T], bias: T) -> Vec<T> {
    let plane = x.plane();
    assert_eq!(weight.len(), x.channels * plane, "dense weight length mismatch");
    (0..x.batch)
        .map(|n| {
            let mut acc = bias;
            for c in 0..x.channels {
                let w = &weight[c * plane..(c + 1) * plane];
                let a = &x.data[x.index(c, n, 0, 0)..x.index(c, n, 0, 0) + plane];
                acc += w.iter().zip(a).map(|(&w, &a)| w * a).sum::<T>();
            }
            acc
        })
        .collect()
}

/// Returns `(d input, d weight, d bias)` for upstream per-sample gradients.
pub fn dense_scalar_backward<T: Real>(x: &FeatureMap<T>, weight: &[T], dout: &[T]) -> (FeatureMap<T>, Vec<T>, T) {
    let plane = x.plane();
    let mut dx = FeatureMap::zeros(x.channels, x.batch, x.height, x.width);
    let mut dw = vec![T::zero(); weight.len()];
    for (n, &g) in dout.iter().enumerate() {
        for c in 0..x.channels {
            let start = x.index(c, n, 0, 0);
            for p in 0..plane {
                dw[c * plane + p] += g * x.data[start + p];
                dx.data[start + p] = g * weight[c * plane + p];
            }
        }
    }
    (dx, dw, dout.iter().copied().sum())
}
