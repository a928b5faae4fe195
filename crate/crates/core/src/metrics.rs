//! Full-frame PSNR and SSIM for images in [0, 1].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::mask::MaskMatrix;

/// Mean squared error over all pixels and channels.
pub fn mse(x: &ImageTensor, y: &ImageTensor) -> Result<f64> {
    x.check_shape(y)?;
    let sum: f64 = x.pixels().iter().zip(y.pixels()).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum();
    Ok(sum / x.pixels().len() as f64)
}

/// `10·log10(1 / MSE)` in dB; identical images give `f64::INFINITY`.
pub fn psnr(x: &ImageTensor, y: &ImageTensor) -> Result<f64> {
    Ok(psnr_from_mse(mse(x, y)?))
}

/// PSNR of two equal-length f64 sample vectors.
pub fn psnr_values(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.is_empty() {
        return Err(Error::contract(format!("psnr inputs have lengths {} and {}", x.len(), y.len())));
    }
    let sum: f64 = x.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(psnr_from_mse(sum / x.len() as f64))
}

fn psnr_from_mse(e: f64) -> f64 {
    if e == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * e.log10()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SsimParams {
    /// Side of the uniform averaging window.
    pub window: usize,
    pub k1: f64,
    pub k2: f64,
    pub data_range: f64,
    /// Use the unbiased (N−1) normalization for variances and covariance.
    pub sample_covariance: bool,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self { window: 7, k1: 0.01, k2: 0.03, data_range: 1.0, sample_covariance: true }
    }
}

impl SsimParams {
    pub fn c1(&self) -> f64 {
        (self.k1 * self.data_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.data_range).powi(2)
    }
}

/// Summed-area table with a zero border row/column.
struct Integral {
    width: usize,
    sums: Vec<f64>,
}

impl Integral {
    fn new(values: impl Iterator<Item = f64>, height: usize, width: usize) -> Self {
        let stride = width + 1;
        let mut sums = vec![0.0; (height + 1) * stride];
        let mut it = values;
        for r in 0..height {
            let mut row = 0.0;
            for c in 0..width {
                row += it.next().expect("plane size");
                sums[(r + 1) * stride + c + 1] = sums[r * stride + c + 1] + row;
            }
        }
        Self { width, sums }
    }

    fn window(&self, r: usize, c: usize, side: usize) -> f64 {
        let s = self.width + 1;
        self.sums[(r + side) * s + c + side] - self.sums[r * s + c + side] - self.sums[(r + side) * s + c] + self.sums[r * s + c]
    }
}

fn ssim_plane(x: &[f64], y: &[f64], height: usize, width: usize, p: &SsimParams) -> f64 {
    let sx = Integral::new(x.iter().copied(), height, width);
    let sy = Integral::new(y.iter().copied(), height, width);
    let sxx = Integral::new(x.iter().map(|v| v * v), height, width);
    let syy = Integral::new(y.iter().map(|v| v * v), height, width);
    let sxy = Integral::new(x.iter().zip(y).map(|(a, b)| a * b), height, width);
    let w = p.window;
    let n = (w * w) as f64;
    let cov_norm = if p.sample_covariance { n / (n - 1.0) } else { 1.0 };
    let (c1, c2) = (p.c1(), p.c2());
    let mut total = 0.0;
    let rows = height - w + 1;
    let cols = width - w + 1;
    for r in 0..rows {
        for c in 0..cols {
            let mx = sx.window(r, c, w) / n;
            let my = sy.window(r, c, w) / n;
            let vx = cov_norm * (sxx.window(r, c, w) / n - mx * mx);
            let vy = cov_norm * (syy.window(r, c, w) / n - my * my);
            let vxy = cov_norm * (sxy.window(r, c, w) / n - mx * my);
            total += ((2.0 * mx * my + c1) * (2.0 * vxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
    }
    total / (rows * cols) as f64
}

/// Mean SSIM over all fully-contained windows, averaged over channels.
pub fn ssim_with(x: &ImageTensor, y: &ImageTensor, params: &SsimParams) -> Result<f64> {
    x.check_shape(y)?;
    if params.window < 2 {
        return Err(Error::validation("SSIM window must be at least 2"));
    }
    if x.height() < params.window || x.width() < params.window {
        return Err(Error::validation(format!(
            "image {}x{} is smaller than the {}x{} SSIM window",
            x.height(),
            x.width(),
            params.window,
            params.window
        )));
    }
    if x == y {
        return Ok(1.0);
    }
    let sum: f64 = (0..3).map(|ch| ssim_plane(&x.channel(ch), &y.channel(ch), x.height(), x.width(), params)).sum();
    Ok((sum / 3.0).clamp(-1.0, 1.0))
}

pub fn ssim(x: &ImageTensor, y: &ImageTensor) -> Result<f64> {
    ssim_with(x, y, &SsimParams::default())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub psnr: f64,
    pub ssim: f64,
    pub missing_fraction: f64,
}

/// Full-frame metrics of an inpainted image, tagged with the mask's
/// missing fraction.
pub fn evaluate_pair(truth: &ImageTensor, inpainted: &ImageTensor, mask: &MaskMatrix, params: &SsimParams) -> Result<PairMetrics> {
    truth.check_mask(mask)?;
    Ok(PairMetrics {
        psnr: psnr(truth, inpainted)?,
        ssim: ssim_with(truth, inpainted, params)?,
        missing_fraction: mask.missing_fraction(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    use crate::rng::SeedStreams;

    fn random_image(side: usize, seed: u64) -> ImageTensor {
        let mut rng = SeedStreams::new(seed).stream("img");
        ImageTensor::from_fn(side, side, |_, _, _| rng.random_range(0.0..1.0))
    }

    #[test]
    fn psnr_analytic_cases() {
        let zero = ImageTensor::filled(8, 8, 0.0);
        assert_eq!(psnr(&zero, &zero).unwrap(), f64::INFINITY);
        assert!((psnr(&zero, &ImageTensor::filled(8, 8, 1.0)).unwrap() - 0.0).abs() < 1e-9);
        // 0.1f32 is not exact; the oracle uses the stored value.
        let tenth = ImageTensor::filled(8, 8, 0.1);
        let expect = -10.0 * (0.1f32 as f64).powi(2).log10();
        assert!((psnr(&zero, &tenth).unwrap() - expect).abs() < 1e-9);
        assert!((expect - 20.0).abs() < 1e-6);
    }

    #[test]
    fn psnr_rejects_shape_mismatch() {
        assert!(psnr(&ImageTensor::filled(4, 4, 0.0), &ImageTensor::filled(4, 5, 0.0)).is_err());
    }

    #[test]
    fn ssim_identity_and_range() {
        let a = random_image(16, 1);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let b = random_image(16, 2);
        let s = ssim(&a, &b).unwrap();
        assert!((-1.0..=1.0).contains(&s));
        assert!((s - ssim(&b, &a).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn ssim_constant_images_closed_form() {
        // μx = 0, μy = 1, no variance: SSIM = C1·C2 / ((1 + C1)·C2).
        let p = SsimParams::default();
        let s = ssim(&ImageTensor::filled(10, 10, 0.0), &ImageTensor::filled(10, 10, 1.0)).unwrap();
        assert!((s - p.c1() / (1.0 + p.c1())).abs() < 1e-12);
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = ImageTensor::filled(6, 6, 0.0);
        assert!(matches!(ssim(&a, &a), Err(Error::Validation(_))));
    }

    #[test]
    fn evaluate_pair_on_identical_images() {
        let a = random_image(8, 3);
        let m = MaskMatrix::zeros(8, 8);
        let r = evaluate_pair(&a, &a, &m, &SsimParams::default()).unwrap();
        assert_eq!((r.psnr, r.ssim, r.missing_fraction), (f64::INFINITY, 1.0, 1.0));
    }
}
