//! Missingness masks and the three damage scenarios.
//!
//! A mask entry of 1 marks a valid pixel, 0 a missing one.

use std::fmt;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, PartialEq, Eq, Hash)]
pub struct MaskMatrix {
    height: usize,
    width: usize,
    bits: Vec<u8>,
}

impl fmt::Debug for MaskMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MaskMatrix")
            .field("height", &self.height)
            .field("width", &self.width)
            .field("missing", &self.missing_count())
            .finish()
    }
}

impl MaskMatrix {
    pub fn ones(height: usize, width: usize) -> Self {
        Self { height, width, bits: vec![1; height * width] }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self { height, width, bits: vec![0; height * width] }
    }

    /// Builds a mask from row-major 0/1 entries.
    pub fn from_bits(height: usize, width: usize, bits: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::validation("mask dimensions must be positive"));
        }
        if bits.len() != height * width {
            return Err(Error::validation(format!(
                "mask has {} entries, expected {}x{}",
                bits.len(),
                height,
                width
            )));
        }
        if let Some(bad) = bits.iter().find(|&&b| b > 1) {
            return Err(Error::validation(format!("mask entry {bad} is not 0 or 1")));
        }
        Ok(Self { height, width, bits })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn is_valid(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col] == 1
    }

    pub fn set(&mut self, row: usize, col: usize, valid: bool) {
        self.bits[row * self.width + col] = valid as u8;
    }

    pub fn missing_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 0).count()
    }

    pub fn missing_fraction(&self) -> f64 {
        self.missing_count() as f64 / self.bits.len() as f64
    }

    /// Marks the intersection of the rectangle with the grid as missing.
    /// Coordinates may fall partly or entirely outside the grid.
    pub fn punch_rect(&mut self, top: i64, left: i64, height: i64, width: i64) {
        let r0 = top.max(0);
        let c0 = left.max(0);
        let r1 = (top + height).min(self.height as i64);
        let c1 = (left + width).min(self.width as i64);
        for r in r0..r1 {
            for c in c0..c1 {
                self.bits[r as usize * self.width + c as usize] = 0;
            }
        }
    }

    /// Single-channel 8-bit PNG: 0 = missing, 255 = valid.
    pub fn to_luma(&self) -> image::GrayImage {
        image::GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            image::Luma([if self.is_valid(y as usize, x as usize) { 255 } else { 0 }])
        })
    }

    /// Reads a mask from any raster: pixels with luma ≥ 128 are valid.
    pub fn from_luma(img: &image::GrayImage) -> Result<Self> {
        let (w, h) = img.dimensions();
        let bits = img.pixels().map(|p| (p.0[0] >= 128) as u8).collect();
        Self::from_bits(h as usize, w as usize, bits)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_luma().save(path)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Ingestion {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::from_luma(&img.to_luma8())
    }

    pub fn encode_png(&self) -> Result<Vec<u8>> {
        let mut buf = std::io::Cursor::new(Vec::new());
        self.to_luma().write_to(&mut buf, image::ImageFormat::Png)?;
        Ok(buf.into_inner())
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Self> {
        let img = image::load_from_memory(bytes)?;
        Self::from_luma(&img.to_luma8())
    }

    /// Compact run-length text form: `HxW:v:r1,r2,...` where `v` is the value
    /// of the first run and runs alternate between 0 and 1 in row-major order.
    pub fn to_rle(&self) -> String {
        let first = self.bits[0];
        let mut runs = Vec::new();
        let mut cur = first;
        let mut len = 0usize;
        for &b in &self.bits {
            if b == cur {
                len += 1;
            } else {
                runs.push(len.to_string());
                cur = b;
                len = 1;
            }
        }
        runs.push(len.to_string());
        format!("{}x{}:{}:{}", self.height, self.width, first, runs.join(","))
    }

    pub fn from_rle(text: &str) -> Result<Self> {
        let bad = || Error::validation(format!("malformed run-length mask: {text:.40}"));
        let mut parts = text.trim().splitn(3, ':');
        let dims = parts.next().ok_or_else(bad)?;
        let first = parts.next().ok_or_else(bad)?;
        let runs = parts.next().ok_or_else(bad)?;
        let (h, w) = dims.split_once('x').ok_or_else(bad)?;
        let h: usize = h.parse().map_err(|_| bad())?;
        let w: usize = w.parse().map_err(|_| bad())?;
        let mut value: u8 = first.parse().map_err(|_| bad())?;
        if value > 1 {
            return Err(bad());
        }
        let mut bits = Vec::with_capacity(h * w);
        for run in runs.split(',') {
            let n: usize = run.parse().map_err(|_| bad())?;
            if bits.len() + n > h * w {
                return Err(bad());
            }
            bits.extend(std::iter::repeat_n(value, n));
            value ^= 1;
        }
        Self::from_bits(h, w, bits)
    }
}

fn check_probability(p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::validation(format!("missing probability {p} outside [0, 1]")));
    }
    Ok(())
}

fn check_side(h: usize, w: usize, side: usize) -> Result<()> {
    if side == 0 || side > h.min(w) {
        return Err(Error::validation(format!(
            "square side {side} must be in 1..={} for a {h}x{w} grid",
            h.min(w)
        )));
    }
    Ok(())
}

/// Each pixel is independently missing with probability `p`.
pub fn gen_noise_mask<R: Rng + ?Sized>(h: usize, w: usize, p: f64, rng: &mut R) -> Result<MaskMatrix> {
    check_probability(p)?;
    let bits = (0..h * w).map(|_| (rng.random::<f64>() >= p) as u8).collect();
    MaskMatrix::from_bits(h, w, bits)
}

/// A centered `side`×`side` hole; odd leftover margins put the extra pixel
/// below/right of the hole.
pub fn gen_center_square_mask(h: usize, w: usize, side: usize) -> Result<MaskMatrix> {
    check_side(h, w, side)?;
    let mut m = MaskMatrix::ones(h, w);
    m.punch_rect(((h - side) / 2) as i64, ((w - side) / 2) as i64, side as i64, side as i64);
    Ok(m)
}

/// `count` fixed-size holes placed uniformly, each fully inside the grid.
pub fn gen_multi_square_mask_eval<R: Rng + ?Sized>(
    h: usize,
    w: usize,
    count: usize,
    side: usize,
    rng: &mut R,
) -> Result<MaskMatrix> {
    if count == 0 {
        return Err(Error::validation("square count must be at least 1"));
    }
    check_side(h, w, side)?;
    let mut m = MaskMatrix::ones(h, w);
    for _ in 0..count {
        let top = rng.random_range(0..=h - side);
        let left = rng.random_range(0..=w - side);
        m.punch_rect(top as i64, left as i64, side as i64, side as i64);
    }
    Ok(m)
}

/// Geometry of the randomized training-time multi-square scenario, expressed
/// as multiples of the image side ℓ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MultiSquareBox {
    pub count: usize,
    /// Corners are uniform in `[corner_lo·ℓ, corner_hi·ℓ]²`.
    pub corner_lo: f64,
    pub corner_hi: f64,
    /// Sides are uniform in `[side_lo·ℓ, side_hi·ℓ]`.
    pub side_lo: f64,
    pub side_hi: f64,
}

impl Default for MultiSquareBox {
    fn default() -> Self {
        Self { count: 30, corner_lo: -2.0, corner_hi: 3.0, side_lo: 1.0 / 5.0, side_hi: 1.0 / 3.0 }
    }
}

/// Square with a real-valued corner and side in image coordinates, where
/// pixel centres sit at 1..=ℓ along each axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RealSquare {
    pub row: f64,
    pub col: f64,
    pub side: f64,
}

impl RealSquare {
    /// Inclusive 0-based pixel span covered along one axis, if any.
    fn span(start: f64, side: f64, len: usize) -> Option<(usize, usize)> {
        let first = start.ceil().max(1.0);
        let last = (start + side).floor().min(len as f64);
        (first <= last).then(|| (first as usize - 1, last as usize - 1))
    }

    fn rasterize(&self, m: &mut MaskMatrix) {
        let n = m.height();
        let (Some((r0, r1)), Some((c0, c1))) =
            (Self::span(self.row, self.side, n), Self::span(self.col, self.side, m.width()))
        else {
            return;
        };
        for r in r0..=r1 {
            for c in c0..=c1 {
                m.set(r, c, false);
            }
        }
    }
}

/// Rasterizes the union of squares clipped to an `n`×`n` grid.
pub fn rasterize_squares(n: usize, squares: &[RealSquare]) -> MaskMatrix {
    let mut m = MaskMatrix::ones(n, n);
    for sq in squares {
        sq.rasterize(&mut m);
    }
    m
}

pub fn gen_multi_square_mask_train<R: Rng + ?Sized>(h: usize, w: usize, rng: &mut R) -> Result<MaskMatrix> {
    gen_multi_square_mask_train_with(h, w, &MultiSquareBox::default(), rng)
}

pub fn gen_multi_square_mask_train_with<R: Rng + ?Sized>(
    h: usize,
    w: usize,
    geometry: &MultiSquareBox,
    rng: &mut R,
) -> Result<MaskMatrix> {
    if h != w {
        return Err(Error::validation(format!("training multi-square masks need a square grid, got {h}x{w}")));
    }
    if h == 0 {
        return Err(Error::validation("mask dimensions must be positive"));
    }
    let l = h as f64;
    let squares: Vec<RealSquare> = (0..geometry.count)
        .map(|_| {
            let row = rng.random_range(geometry.corner_lo * l..=geometry.corner_hi * l);
            let col = rng.random_range(geometry.corner_lo * l..=geometry.corner_hi * l);
            let side = rng.random_range(geometry.side_lo * l..=geometry.side_hi * l);
            RealSquare { row, col, side }
        })
        .collect();
    Ok(rasterize_squares(h, &squares))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioKind {
    Noise,
    CenterSquare,
    MultiSquare,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 3] = [ScenarioKind::Noise, ScenarioKind::CenterSquare, ScenarioKind::MultiSquare];
}

/// One fixed evaluation-time missingness distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EvalScenario {
    Noise { p: f64 },
    CenterSquare { side: usize },
    MultiSquare { count: usize, side: usize },
}

impl EvalScenario {
    pub fn kind(&self) -> ScenarioKind {
        match self {
            EvalScenario::Noise { .. } => ScenarioKind::Noise,
            EvalScenario::CenterSquare { .. } => ScenarioKind::CenterSquare,
            EvalScenario::MultiSquare { .. } => ScenarioKind::MultiSquare,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, h: usize, w: usize, rng: &mut R) -> Result<MaskMatrix> {
        match *self {
            EvalScenario::Noise { p } => gen_noise_mask(h, w, p, rng),
            EvalScenario::CenterSquare { side } => gen_center_square_mask(h, w, side),
            EvalScenario::MultiSquare { count, side } => gen_multi_square_mask_eval(h, w, count, side, rng),
        }
    }

    pub fn validate(&self, h: usize, w: usize) -> Result<()> {
        match *self {
            EvalScenario::Noise { p } => check_probability(p),
            EvalScenario::CenterSquare { side } => check_side(h, w, side),
            EvalScenario::MultiSquare { count, side } => {
                if count == 0 {
                    return Err(Error::validation("square count must be at least 1"));
                }
                check_side(h, w, side)
            }
        }
    }

    /// Short stable label, e.g. `noise-75`, `center-square-64`.
    pub fn label(&self) -> String {
        match *self {
            EvalScenario::Noise { p } => format!("noise-{}", (p * 100.0).round() as i64),
            EvalScenario::CenterSquare { side } => format!("center-square-{side}"),
            EvalScenario::MultiSquare { count, side } => format!("multi-square-{count}x{side}"),
        }
    }

    /// The five evaluation scenarios for an image of side `side`, in table
    /// order: single square (half the side, 25% missing), five squares of
    /// side ≈ 0.242·ℓ (31 px at 128), then noise at 50/75/95%.
    pub fn standard_set(side: usize) -> Vec<EvalScenario> {
        let multi_side = ((side as f64 * 31.0 / 128.0).round() as usize).clamp(1, side);
        vec![
            EvalScenario::CenterSquare { side: (side / 2).max(1) },
            EvalScenario::MultiSquare { count: 5, side: multi_side },
            EvalScenario::Noise { p: 0.50 },
            EvalScenario::Noise { p: 0.75 },
            EvalScenario::Noise { p: 0.95 },
        ]
    }
}

/// Training-time mixture over the three scenario kinds with randomized
/// parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainScenarios {
    pub noise_p: (f64, f64),
    /// The center-square side is drawn from `[ℓ/lo_div, ℓ/hi_div]`, rounded
    /// inward to integers.
    pub center_side_divisors: (f64, f64),
    pub multi_square: MultiSquareBox,
}

impl Default for TrainScenarios {
    fn default() -> Self {
        Self { noise_p: (0.5, 0.95), center_side_divisors: (2.5, 1.6), multi_square: MultiSquareBox::default() }
    }
}

impl TrainScenarios {
    /// Integer side range of the center-square branch for side `l`.
    pub fn center_side_range(&self, l: usize) -> Result<(usize, usize)> {
        let lo = (l as f64 / self.center_side_divisors.0).ceil() as usize;
        let hi = (l as f64 / self.center_side_divisors.1).floor() as usize;
        let lo = lo.max(1);
        let hi = hi.min(l);
        if lo > hi {
            return Err(Error::validation(format!("empty center-square side range for side {l}")));
        }
        Ok((lo, hi))
    }

    pub fn validate(&self) -> Result<()> {
        let (a, b) = self.noise_p;
        check_probability(a)?;
        check_probability(b)?;
        if a > b {
            return Err(Error::validation("noise probability range is empty"));
        }
        let (d0, d1) = self.center_side_divisors;
        if !(d0 >= d1 && d1 >= 1.0) {
            return Err(Error::validation("center-square divisors must satisfy lo ≥ hi ≥ 1"));
        }
        let g = &self.multi_square;
        if g.corner_lo > g.corner_hi || g.side_lo > g.side_hi || g.side_lo <= 0.0 {
            return Err(Error::validation("multi-square training box is empty"));
        }
        Ok(())
    }
}

/// A missingness distribution: either a fixed evaluation scenario or the
/// randomized training mixture.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "kebab-case")]
pub enum ScenarioSpec {
    Train(TrainScenarios),
    Eval(EvalScenario),
}

/// Draws a training mask and reports which scenario kind produced it.
pub fn draw_training_mask<R: Rng + ?Sized>(
    spec: &ScenarioSpec,
    h: usize,
    w: usize,
    rng: &mut R,
) -> Result<(ScenarioKind, MaskMatrix)> {
    let ScenarioSpec::Train(mix) = spec else {
        return Err(Error::contract("training masks require a train-variant scenario spec"));
    };
    if h != w {
        return Err(Error::validation(format!("training masks need a square grid, got {h}x{w}")));
    }
    let kind = ScenarioKind::ALL[rng.random_range(0..3)];
    let mask = match kind {
        ScenarioKind::Noise => {
            let p = rng.random_range(mix.noise_p.0..=mix.noise_p.1);
            gen_noise_mask(h, w, p, rng)?
        }
        ScenarioKind::CenterSquare => {
            let (lo, hi) = mix.center_side_range(h)?;
            gen_center_square_mask(h, w, rng.random_range(lo..=hi))?
        }
        ScenarioKind::MultiSquare => gen_multi_square_mask_train_with(h, w, &mix.multi_square, rng)?,
    };
    Ok((kind, mask))
}

pub fn sample_training_mask<R: Rng + ?Sized>(
    spec: &ScenarioSpec,
    h: usize,
    w: usize,
    rng: &mut R,
) -> Result<MaskMatrix> {
    draw_training_mask(spec, h, w, rng).map(|(_, m)| m)
}
