//! Image ingestion: square center-crop, bilinear resize, [0, 1] scaling,
//! seeded train/eval splits, and a procedural corpus for desk-scale runs.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use image::DynamicImage;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::mask::MaskMatrix;
use crate::rng::SeedStreams;

pub const DATA_DIR_ENV: &str = "WGAIN_DATA_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub source_dir: PathBuf,
    pub target_side: usize,
    pub train_fraction: f64,
    pub eval_fraction: f64,
    pub shuffle_seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self { source_dir: PathBuf::from("data"), target_side: 128, train_fraction: 0.8, eval_fraction: 0.2, shuffle_seed: 0 }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.target_side < 8 {
            return Err(Error::validation(format!("target_side {} is below 8", self.target_side)));
        }
        let (t, e) = (self.train_fraction, self.eval_fraction);
        if !(t > 0.0 && e > 0.0 && t + e <= 1.0 + 1e-12) {
            return Err(Error::validation(format!("split fractions ({t}, {e}) must be positive and sum to at most 1")));
        }
        Ok(())
    }

    /// Applies the `WGAIN_DATA_DIR` override when set.
    pub fn with_env_override(mut self) -> Self {
        if let Some(dir) = std::env::var_os(DATA_DIR_ENV).filter(|d| !d.is_empty()) {
            self.source_dir = PathBuf::from(dir);
        }
        self
    }
}

/// Largest centered square of a `w`×`h` raster: `(x0, y0, side)`.
pub fn center_square_crop(w: u32, h: u32) -> (u32, u32, u32) {
    let side = w.min(h);
    ((w - side) / 2, (h - side) / 2, side)
}

/// Converts a decoded raster to planar-interleaved RGB floats in [0, 1],
/// scaling by the maximum of the source bit depth.
fn normalized_rgb(raw: &DynamicImage) -> (u32, u32, Vec<f32>) {
    let (w, h) = (raw.width(), raw.height());
    let pixels = match raw {
        DynamicImage::ImageLuma8(_) | DynamicImage::ImageLumaA8(_) | DynamicImage::ImageRgb8(_) | DynamicImage::ImageRgba8(_) => {
            raw.to_rgb8().into_raw().into_iter().map(|v| v as f32 / 255.0).collect()
        }
        DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA16(_) | DynamicImage::ImageRgb16(_) | DynamicImage::ImageRgba16(_) => {
            raw.to_rgb16().into_raw().into_iter().map(|v| v as f32 / 65535.0).collect()
        }
        _ => raw.to_rgb32f().into_raw().into_iter().map(|v| v.clamp(0.0, 1.0)).collect(),
    };
    (w, h, pixels)
}

/// Bilinear resize of an interleaved RGB square using half-pixel centres.
/// Equal sizes reproduce the input exactly.
fn resize_bilinear(src: &[f32], src_side: usize, dst_side: usize) -> Vec<f32> {
    if src_side == dst_side {
        return src.to_vec();
    }
    let scale = src_side as f64 / dst_side as f64;
    let axis = |d: usize| -> (usize, usize, f32) {
        let s = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (src_side - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(src_side - 1);
        (i0, i1, (s - i0 as f64) as f32)
    };
    let taps: Vec<_> = (0..dst_side).map(axis).collect();
    let mut out = Vec::with_capacity(dst_side * dst_side * 3);
    for &(r0, r1, fy) in &taps {
        for &(c0, c1, fx) in &taps {
            for ch in 0..3 {
                let at = |r: usize, c: usize| src[(r * src_side + c) * 3 + ch];
                let top = at(r0, c0) * (1.0 - fx) + at(r0, c1) * fx;
                let bottom = at(r1, c0) * (1.0 - fx) + at(r1, c1) * fx;
                out.push((top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0));
            }
        }
    }
    out
}

/// Decoded raster at its native size, scaled to [0, 1].
pub fn image_from_dynamic(raw: &DynamicImage) -> Result<ImageTensor> {
    let (w, h, pixels) = normalized_rgb(raw);
    ImageTensor::new(h as usize, w as usize, pixels)
}

/// Decodes PNG or JPEG bytes without resizing.
pub fn decode_image(bytes: &[u8]) -> Result<ImageTensor> {
    image_from_dynamic(&image::load_from_memory(bytes)?)
}

/// Center-crops a mask to a square and resamples it to `target_side` by
/// nearest neighbour, matching the image path's crop.
pub fn preprocess_mask(m: &MaskMatrix, target_side: usize) -> Result<MaskMatrix> {
    if m.height() == 0 || m.width() == 0 || target_side == 0 {
        return Err(Error::validation("cannot resample an empty mask"));
    }
    let (x0, y0, side) = center_square_crop(m.width() as u32, m.height() as u32);
    let (x0, y0, side) = (x0 as usize, y0 as usize, side as usize);
    let scale = side as f64 / target_side as f64;
    let src = |d: usize| (((d as f64 + 0.5) * scale).floor() as usize).min(side - 1);
    let mut bits = Vec::with_capacity(target_side * target_side);
    for r in 0..target_side {
        for c in 0..target_side {
            bits.push(m.bits()[(y0 + src(r)) * m.width() + x0 + src(c)]);
        }
    }
    MaskMatrix::from_bits(target_side, target_side, bits)
}

pub fn preprocess_image(raw: &DynamicImage, target_side: usize) -> Result<ImageTensor> {
    if raw.width() == 0 || raw.height() == 0 {
        return Err(Error::validation("cannot preprocess a zero-area image"));
    }
    if target_side == 0 {
        return Err(Error::validation("target side must be positive"));
    }
    let (w, _h, pixels) = normalized_rgb(raw);
    let (x0, y0, side) = center_square_crop(raw.width(), raw.height());
    let (w, side, x0, y0) = (w as usize, side as usize, x0 as usize, y0 as usize);
    let mut square = Vec::with_capacity(side * side * 3);
    for r in y0..y0 + side {
        let start = (r * w + x0) * 3;
        square.extend_from_slice(&pixels[start..start + side * 3]);
    }
    ImageTensor::new(target_side, target_side, resize_bilinear(&square, side, target_side))
}

pub fn load_image_file(path: &Path, target_side: usize) -> Result<ImageTensor> {
    let raw = image::open(path).map_err(|e| Error::Ingestion { path: path.to_path_buf(), reason: e.to_string() })?;
    preprocess_image(&raw, target_side).map_err(|e| match e {
        Error::Validation(reason) => Error::Ingestion { path: path.to_path_buf(), reason },
        other => other,
    })
}

/// A lazily decoded corpus entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusItem {
    pub path: PathBuf,
}

impl CorpusItem {
    pub fn load(&self, target_side: usize) -> Result<ImageTensor> {
        load_image_file(&self.path, target_side)
    }
}

#[derive(Debug, Clone, Default)]
pub struct CorpusSplit {
    pub train: Vec<CorpusItem>,
    pub eval: Vec<CorpusItem>,
}

/// Split sizes for `n` items: eval takes `floor(n·eval)`, train takes
/// `ceil(n·train)` of what remains.
pub fn split_sizes(n: usize, train_fraction: f64, eval_fraction: f64) -> (usize, usize) {
    const SLACK: f64 = 1e-9;
    let n_eval = ((n as f64 * eval_fraction) + SLACK).floor() as usize;
    let n_train = ((n as f64 * train_fraction) - SLACK).ceil().max(0.0) as usize;
    (n_train.min(n - n_eval), n_eval)
}

fn is_image_file(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
        .unwrap_or(false)
}

fn collect_images(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in std::fs::read_dir(dir).map_err(|e| Error::Ingestion { path: dir.to_path_buf(), reason: e.to_string() })? {
        let path = entry?.path();
        if path.is_dir() {
            collect_images(&path, out)?;
        } else if is_image_file(&path) {
            out.push(path);
        }
    }
    Ok(())
}

/// Lists PNG/JPEG files under `source_dir` and splits them with a seeded
/// shuffle. Images are decoded on demand.
pub fn load_corpus(cfg: &CorpusConfig) -> Result<CorpusSplit> {
    cfg.validate()?;
    let mut files = Vec::new();
    collect_images(&cfg.source_dir, &mut files)?;
    if files.is_empty() {
        return Err(Error::Ingestion { path: cfg.source_dir.clone(), reason: "no PNG or JPEG images found".into() });
    }
    files.sort();
    files.shuffle(&mut SeedStreams::new(cfg.shuffle_seed).stream("corpus-split"));
    let (n_train, n_eval) = split_sizes(files.len(), cfg.train_fraction, cfg.eval_fraction);
    if n_eval == 0 {
        log::warn!("corpus of {} image(s) leaves the eval split empty", files.len());
    }
    let mut items = files.into_iter().map(|path| CorpusItem { path });
    let train = items.by_ref().take(n_train).collect();
    let eval = items.take(n_eval).collect();
    Ok(CorpusSplit { train, eval })
}

pub fn load_all(items: &[CorpusItem], target_side: usize) -> Result<Vec<ImageTensor>> {
    items.iter().map(|it| it.load(target_side)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticKind {
    Gradient,
    Circle,
    TexturedRect,
}

impl SyntheticKind {
    pub fn of_index(i: usize) -> Self {
        [SyntheticKind::Gradient, SyntheticKind::Circle, SyntheticKind::TexturedRect][i % 3]
    }
}

fn random_color<R: Rng + ?Sized>(rng: &mut R) -> [f32; 3] {
    [rng.random_range(0.05..0.95), rng.random_range(0.05..0.95), rng.random_range(0.05..0.95)]
}

/// `n` procedural images cycling through linear gradients, disks on a
/// shaded background, and striped rectangles.
pub fn make_synthetic_corpus<R: Rng + ?Sized>(n: usize, side: usize, rng: &mut R) -> Result<Vec<ImageTensor>> {
    if n == 0 || side == 0 {
        return Err(Error::validation("synthetic corpus needs n ≥ 1 and side ≥ 1"));
    }
    Ok((0..n).map(|i| synthetic_image(SyntheticKind::of_index(i), side, rng)).collect())
}

pub fn synthetic_image<R: Rng + ?Sized>(kind: SyntheticKind, side: usize, rng: &mut R) -> ImageTensor {
    let s = side as f32;
    match kind {
        SyntheticKind::Gradient => {
            // Each channel runs linearly between two distinct endpoints, so it
            // is strictly monotone along the chosen axis. Every line across
            // the axis carries a fixed offset (streak texture), so the image
            // is not a low-order polynomial.
            let vertical = rng.random_bool(0.5);
            let ends: Vec<(f32, f32)> = (0..3)
                .map(|_| {
                    let a = rng.random_range(0.0..0.4);
                    let b = rng.random_range(0.6..1.0);
                    if rng.random_bool(0.5) { (a, b) } else { (b, a) }
                })
                .collect();
            let streaks: Vec<f32> = (0..side).map(|_| rng.random_range(-0.05..0.05)).collect();
            let denom = (side.max(2) - 1) as f32;
            ImageTensor::from_fn(side, side, |r, c, ch| {
                let (along, across) = if vertical { (r, c) } else { (c, r) };
                let (a, b) = ends[ch];
                0.05 + 0.9 * (a + (b - a) * along as f32 / denom) + streaks[across]
            })
        }
        SyntheticKind::Circle => {
            let bg = random_color(rng);
            let fg = random_color(rng);
            let cy = rng.random_range(0.3..0.7) * s;
            let cx = rng.random_range(0.3..0.7) * s;
            let radius = rng.random_range(0.15..0.35) * s;
            ImageTensor::from_fn(side, side, |r, c, ch| {
                let dy = r as f32 + 0.5 - cy;
                let dx = c as f32 + 0.5 - cx;
                let shade = 0.15 * (r as f32 / s);
                if (dy * dy + dx * dx).sqrt() <= radius {
                    fg[ch]
                } else {
                    (bg[ch] * (1.0 - shade)).clamp(0.0, 1.0)
                }
            })
        }
        SyntheticKind::TexturedRect => {
            let bg = random_color(rng);
            let fg = random_color(rng);
            let top = rng.random_range(0.1..0.4) * s;
            let left = rng.random_range(0.1..0.4) * s;
            let h = rng.random_range(0.3..0.5) * s;
            let w = rng.random_range(0.3..0.5) * s;
            let period = rng.random_range(3..6usize);
            ImageTensor::from_fn(side, side, |r, c, ch| {
                let (rf, cf) = (r as f32, c as f32);
                if rf >= top && rf < top + h && cf >= left && cf < left + w {
                    let stripe = if ((r + c) / period) % 2 == 0 { 1.0 } else { 0.7 };
                    fg[ch] * stripe
                } else {
                    bg[ch]
                }
            })
        }
    }
}

/// Writes preprocessed splits into one packed tensor file.
pub fn write_packed(path: &Path, splits: &[(&str, &[ImageTensor])]) -> Result<()> {
    let mut buffers: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
    for (name, images) in splits {
        let side = images.first().map(|i| i.height()).unwrap_or(0);
        if images.iter().any(|i| i.height() != side || i.width() != side) {
            return Err(Error::validation(format!("split {name} mixes image sizes")));
        }
        let bytes: Vec<u8> = images.iter().flat_map(|i| i.pixels().iter().flat_map(|v| v.to_le_bytes())).collect();
        buffers.push((name.to_string(), vec![images.len(), side, side, 3], bytes));
    }
    let views: Vec<(String, safetensors::tensor::TensorView<'_>)> = buffers
        .iter()
        .map(|(n, shape, bytes)| {
            safetensors::tensor::TensorView::new(safetensors::Dtype::F32, shape.clone(), bytes)
                .map(|v| (n.clone(), v))
                .map_err(|e| Error::validation(e.to_string()))
        })
        .collect::<Result<_>>()?;
    let meta = HashMap::from([("format".to_string(), "wgain-packed-corpus-v1".to_string())]);
    safetensors::serialize_to_file(views, &Some(meta), path).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    Ok(())
}

pub fn read_packed(path: &Path) -> Result<HashMap<String, Vec<ImageTensor>>> {
    let bytes = std::fs::read(path)?;
    let st = safetensors::SafeTensors::deserialize(&bytes)
        .map_err(|e| Error::Ingestion { path: path.to_path_buf(), reason: e.to_string() })?;
    let mut out = HashMap::new();
    for (name, view) in st.tensors() {
        let shape = view.shape();
        if shape.len() != 4 || shape[3] != 3 || view.dtype() != safetensors::Dtype::F32 {
            return Err(Error::Ingestion { path: path.to_path_buf(), reason: format!("tensor {name} is not an N×S×S×3 f32 stack") });
        }
        let values: Vec<f32> = view.data().chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        let per = shape[1] * shape[2] * 3;
        let images = if per == 0 {
            Vec::new()
        } else {
            values.chunks_exact(per).map(|px| ImageTensor::new(shape[1], shape[2], px.to_vec())).collect::<Result<_>>()?
        };
        out.insert(name, images);
    }
    Ok(out)
}
