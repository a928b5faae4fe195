use std::path::Path;

use image::{DynamicImage, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::mask::MaskMatrix;

/// An H×W RGB image with channel values nominally in [0, 1], stored
/// row-major with interleaved channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl ImageTensor {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::validation("image dimensions must be positive"));
        }
        if pixels.len() != height * width * 3 {
            return Err(Error::validation(format!(
                "image buffer has {} values, expected {height}x{width}x3",
                pixels.len()
            )));
        }
        Ok(Self { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self { height, width, pixels: vec![value; height * width * 3] }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut pixels = Vec::with_capacity(height * width * 3);
        for r in 0..height {
            for c in 0..width {
                for ch in 0..3 {
                    pixels.push(f(r, c, ch));
                }
            }
        }
        Self { height, width, pixels }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<f32> {
        self.pixels
    }

    pub fn get(&self, row: usize, col: usize, ch: usize) -> f32 {
        self.pixels[(row * self.width + col) * 3 + ch]
    }

    pub fn set(&mut self, row: usize, col: usize, ch: usize, v: f32) {
        self.pixels[(row * self.width + col) * 3 + ch] = v;
    }

    pub fn same_shape(&self, other: &ImageTensor) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn check_shape(&self, other: &ImageTensor) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::contract(format!(
                "image shapes differ: {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }

    pub fn check_mask(&self, mask: &MaskMatrix) -> Result<()> {
        if self.height != mask.height() || self.width != mask.width() {
            return Err(Error::contract(format!(
                "image is {}x{} but mask is {}x{}",
                self.height,
                self.width,
                mask.height(),
                mask.width()
            )));
        }
        Ok(())
    }

    /// Channel `ch` as a row-major plane.
    pub fn channel(&self, ch: usize) -> Vec<f64> {
        self.pixels.iter().skip(ch).step_by(3).map(|&v| v as f64).collect()
    }

    pub fn from_channels(height: usize, width: usize, planes: [&[f64]; 3]) -> Result<Self> {
        let n = height * width;
        if planes.iter().any(|p| p.len() != n) {
            return Err(Error::validation("channel planes do not match the image size"));
        }
        let mut pixels = Vec::with_capacity(n * 3);
        for i in 0..n {
            for p in &planes {
                pixels.push(p[i] as f32);
            }
        }
        Self::new(height, width, pixels)
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.pixels
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Quantizes to 8-bit RGB (values are clamped to [0, 1] first).
    pub fn to_rgb8(&self) -> RgbImage {
        RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let base = (y as usize * self.width + x as usize) * 3;
            let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            Rgb([q(self.pixels[base]), q(self.pixels[base + 1]), q(self.pixels[base + 2])])
        })
    }

    /// Exact conversion of 8-bit RGB into [0, 1].
    pub fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = img.dimensions();
        let pixels = img.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
        Self { height: h as usize, width: w as usize, pixels }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut buf = std::io::Cursor::new(Vec::new());
        DynamicImage::ImageRgb8(self.to_rgb8()).write_to(&mut buf, image::ImageFormat::Png)?;
        Ok(buf.into_inner())
    }
}
