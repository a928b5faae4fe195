//! Minimal convolutional building blocks with hand-written backward passes.
//!
//! Activations are stored channel-major as `[C, N, H, W]`: one im2col matrix
//! covers a whole chunk of the batch, so every convolution is a single GEMM
//! whose output already has the right layout.

pub mod conv;
pub mod ops;
pub mod params;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

pub use conv::{Conv, ConvGeometry};
pub use params::{Adam, AdamConfig, Grads, Param, ParamKind, ParamSet};

/// Floating-point element type of a network.
pub trait Real:
    Float + Default + Debug + Send + Sync + 'static + AddAssign + SubAssign + MulAssign + Sum
{
    /// `C = alpha·A·B + beta·C` for strided row/column-major views.
    ///
    /// # Safety
    /// Pointers and strides must address valid `m×k`, `k×n` and `m×n`
    /// matrices; `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn of(v: f64) -> Self {
        <Self as num_traits::NumCast>::from(v).expect("finite constant")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// A strided matrix view into a slice.
#[derive(Clone, Copy)]
pub struct MatView {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl MatView {
    pub fn row_major(offset: usize, rows: usize, cols: usize, row_stride: usize) -> Self {
        Self { offset, rows, cols, row_stride, col_stride: 1 }
    }

    /// Transposed view of a row-major `rows×cols` block.
    pub fn transposed(self) -> Self {
        Self { rows: self.cols, cols: self.rows, row_stride: self.col_stride, col_stride: self.row_stride, ..self }
    }

    fn last_index(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return self.offset;
        }
        self.offset + (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride
    }
}

/// Bounds-checked `C = alpha·A·B + beta·C`.
pub fn gemm<T: Real>(alpha: T, a: &[T], av: MatView, b: &[T], bv: MatView, beta: T, c: &mut [T], cv: MatView) {
    assert_eq!(av.cols, bv.rows, "inner dimensions differ");
    assert_eq!((av.rows, bv.cols), (cv.rows, cv.cols), "output shape mismatch");
    if cv.rows == 0 || cv.cols == 0 {
        return;
    }
    assert!(av.cols == 0 || av.last_index() < a.len(), "A view out of bounds");
    assert!(bv.rows == 0 || bv.last_index() < b.len(), "B view out of bounds");
    assert!(cv.last_index() < c.len(), "C view out of bounds");
    // SAFETY: every view was checked to lie inside its slice; `c` is a
    // unique borrow so it cannot alias `a` or `b`.
    unsafe {
        T::gemm_raw(
            av.rows,
            av.cols,
            bv.cols,
            alpha,
            a.as_ptr().add(av.offset),
            av.row_stride as isize,
            av.col_stride as isize,
            b.as_ptr().add(bv.offset),
            bv.row_stride as isize,
            bv.col_stride as isize,
            beta,
            c.as_mut_ptr().add(cv.offset),
            cv.row_stride as isize,
            cv.col_stride as isize,
        )
    }
}

/// Batch of feature maps in `[C, N, H, W]` layout.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    pub channels: usize,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Real> FeatureMap<T> {
    pub fn zeros(channels: usize, batch: usize, height: usize, width: usize) -> Self {
        Self { channels, batch, height, width, data: vec![T::zero(); channels * batch * height * width] }
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    /// Elements per channel (all images of the batch).
    pub fn channel_len(&self) -> usize {
        self.batch * self.plane()
    }

    pub fn index(&self, c: usize, n: usize, y: usize, x: usize) -> usize {
        ((c * self.batch + n) * self.height + y) * self.width + x
    }

    pub fn channel_slice(&self, c: usize) -> &[T] {
        let len = self.channel_len();
        &self.data[c * len..(c + 1) * len]
    }

    pub fn same_geometry(&self, other: &Self) -> bool {
        self.batch == other.batch && self.height == other.height && self.width == other.width
    }

    /// Concatenates along the channel axis.
    pub fn concat(parts: &[&FeatureMap<T>]) -> Self {
        let first = parts[0];
        assert!(parts.iter().all(|p| p.same_geometry(first)), "concat geometry mismatch");
        let channels = parts.iter().map(|p| p.channels).sum();
        let mut data = Vec::with_capacity(channels * first.channel_len());
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Self { channels, batch: first.batch, height: first.height, width: first.width, data }
    }

    /// Splits along the channel axis into pieces of the given widths.
    pub fn split(&self, widths: &[usize]) -> Vec<FeatureMap<T>> {
        assert_eq!(widths.iter().sum::<usize>(), self.channels, "split widths must cover all channels");
        let len = self.channel_len();
        let mut start = 0;
        widths
            .iter()
            .map(|&w| {
                let part = FeatureMap {
                    channels: w,
                    batch: self.batch,
                    height: self.height,
                    width: self.width,
                    data: self.data[start * len..(start + w) * len].to_vec(),
                };
                start += w;
                part
            })
            .collect()
    }

    pub fn cast<U: Real>(&self) -> FeatureMap<U> {
        FeatureMap {
            channels: self.channels,
            batch: self.batch,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
