//! Paired evaluation of the generator and the biharmonic baseline over the
//! standard scenarios, with table and image-grid output.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::biharmonic::biharmonic_inpaint;
use crate::checkpoint::model_hash;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::mask::{EvalScenario, MaskMatrix};
use crate::metrics::{evaluate_pair, SsimParams};
use crate::model::{mask_image, sample_noise, WgainModel};
use crate::rng::SeedStreams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub seed: u64,
    pub sigma: f64,
    pub ssim: SsimParams,
    /// Noise draws per image; metrics are averaged over them.
    pub noise_samples: usize,
    /// How many examples per scenario to keep for image grids.
    pub grid_examples: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { seed: 0, sigma: 0.1, ssim: SsimParams::default(), noise_samples: 1, grid_examples: 4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellStats {
    /// Mean over samples with finite PSNR; `None` if there are none.
    pub mean_psnr: Option<f64>,
    pub mean_ssim: f64,
    pub samples: usize,
    /// Samples excluded from the PSNR mean because they were exact.
    pub infinite_psnr: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioRow {
    pub scenario: EvalScenario,
    pub name: String,
    pub mean_missing_fraction: f64,
    pub wgain: CellStats,
    pub biharmonic: CellStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub checkpoint_hash: String,
    pub ssim: SsimParams,
    pub seed: u64,
    pub sigma: f64,
    pub noise_samples: usize,
    pub eval_images: usize,
    /// Digest over everything above plus the scenario list.
    pub digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ScenarioRow>,
    pub fingerprint: Fingerprint,
}

/// One rendered example: ground truth, mask and both reconstructions.
#[derive(Debug, Clone)]
pub struct Example {
    pub truth: ImageTensor,
    pub mask: MaskMatrix,
    pub wgain: ImageTensor,
    pub biharmonic: ImageTensor,
}

#[derive(Debug, Clone)]
pub struct EvalRun {
    pub report: EvalReport,
    /// Per scenario row, the first few examples.
    pub examples: Vec<Vec<Example>>,
}

/// Row title in the results table.
pub fn row_name(s: &EvalScenario) -> String {
    match *s {
        EvalScenario::CenterSquare { .. } => "Single square".into(),
        EvalScenario::MultiSquare { .. } => "Multisquare".into(),
        EvalScenario::Noise { p } => format!("Noise {}%", (p * 100.0).round() as i64),
    }
}

/// Per-image key so masks and noise follow the image, not its position.
fn image_key(img: &ImageTensor) -> u64 {
    let mut h = Sha256::new();
    for v in img.pixels() {
        h.update(v.to_le_bytes());
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest length"))
}

/// Order-independent mean: values are summed in sorted order.
fn stable_mean(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    Some(v.iter().sum::<f64>() / v.len() as f64)
}

fn cell(psnr: Vec<f64>, ssim: Vec<f64>) -> CellStats {
    let samples = psnr.len();
    let finite: Vec<f64> = psnr.into_iter().filter(|v| v.is_finite()).collect();
    CellStats {
        infinite_psnr: samples - finite.len(),
        mean_psnr: stable_mean(finite),
        mean_ssim: stable_mean(ssim).unwrap_or(f64::NAN),
        samples,
    }
}

struct Measured {
    missing: f64,
    wgain: (f64, f64),
    biharmonic: (f64, f64),
    example: Option<Example>,
}

fn measure(
    model: &WgainModel<f32>,
    img: &ImageTensor,
    scenario: &EvalScenario,
    opts: &EvalOptions,
    streams: &SeedStreams,
    keep: bool,
) -> Result<Measured> {
    let label = scenario.label();
    let key = image_key(img);
    let mask = scenario.sample(img.height(), img.width(), &mut streams.indexed(&format!("mask/{label}"), key))?;
    let mut noise_rng = streams.indexed(&format!("noise/{label}"), key);
    let (mut psnr, mut ssim) = (Vec::new(), Vec::new());
    let mut first = None;
    for _ in 0..opts.noise_samples {
        let z = sample_noise(img.height(), img.width(), opts.sigma, &mut noise_rng)?;
        let out = model.generator.inpaint(img, &mask, &z)?;
        let m = evaluate_pair(img, &out, &mask, &opts.ssim)?;
        psnr.push(m.psnr);
        ssim.push(m.ssim);
        first.get_or_insert(out);
    }
    let baseline = biharmonic_inpaint(&mask_image(img, &mask)?, &mask)?;
    let b = evaluate_pair(img, &baseline, &mask, &opts.ssim)?;
    let mean_or_inf = |v: Vec<f64>| if v.iter().all(|x| x.is_infinite()) { f64::INFINITY } else { stable_mean(v.into_iter().filter(|x| x.is_finite()).collect()).unwrap_or(f64::INFINITY) };
    Ok(Measured {
        missing: mask.missing_fraction(),
        wgain: (mean_or_inf(psnr), stable_mean(ssim).unwrap_or(f64::NAN)),
        biharmonic: (b.psnr, b.ssim),
        example: keep.then(|| Example { truth: img.clone(), mask, wgain: first.expect("at least one sample"), biharmonic: baseline }),
    })
}

/// Evaluates every image under every scenario with both methods on
/// identical masks. Images are processed on all available cores.
pub fn run_scenarios(
    model: &WgainModel<f32>,
    eval_set: &[ImageTensor],
    scenarios: &[EvalScenario],
    opts: &EvalOptions,
) -> Result<EvalRun> {
    if eval_set.is_empty() {
        return Err(Error::validation("evaluation set is empty"));
    }
    if opts.noise_samples == 0 {
        return Err(Error::validation("noise_samples must be at least 1"));
    }
    let side = model.generator.config.input_side;
    for img in eval_set {
        if img.height() != side || img.width() != side {
            return Err(Error::contract(format!("eval image is {}x{}, model expects {side}x{side}", img.height(), img.width())));
        }
    }
    for s in scenarios {
        s.validate(side, side)?;
    }
    let streams = SeedStreams::new(opts.seed);
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(eval_set.len());
    let mut rows = Vec::with_capacity(scenarios.len());
    let mut examples = Vec::with_capacity(scenarios.len());
    for scenario in scenarios {
        let chunk = eval_set.len().div_ceil(threads);
        let measured: Vec<Measured> = std::thread::scope(|scope| {
            let handles: Vec<_> = eval_set
                .chunks(chunk)
                .enumerate()
                .map(|(ci, imgs)| {
                    let streams = &streams;
                    scope.spawn(move || {
                        imgs.iter()
                            .enumerate()
                            .map(|(i, img)| measure(model, img, scenario, opts, streams, ci * chunk + i < opts.grid_examples))
                            .collect::<Result<Vec<_>>>()
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect::<Result<Vec<Vec<_>>>>()
        })?
        .into_iter()
        .flatten()
        .collect();
        let (wp, ws): (Vec<f64>, Vec<f64>) = measured.iter().map(|m| m.wgain).unzip();
        let (bp, bs): (Vec<f64>, Vec<f64>) = measured.iter().map(|m| m.biharmonic).unzip();
        rows.push(ScenarioRow {
            scenario: *scenario,
            name: row_name(scenario),
            mean_missing_fraction: stable_mean(measured.iter().map(|m| m.missing).collect()).unwrap_or(0.0),
            wgain: cell(wp, ws),
            biharmonic: cell(bp, bs),
        });
        examples.push(measured.into_iter().filter_map(|m| m.example).collect());
    }
    let checkpoint_hash = model_hash(model);
    let digest_input = serde_json::to_vec(&(&checkpoint_hash, &opts, scenarios, eval_set.len()))?;
    let fingerprint = Fingerprint {
        checkpoint_hash,
        ssim: opts.ssim,
        seed: opts.seed,
        sigma: opts.sigma,
        noise_samples: opts.noise_samples,
        eval_images: eval_set.len(),
        digest: Sha256::digest(&digest_input).iter().map(|b| format!("{b:02x}")).collect(),
    };
    Ok(EvalRun { report: EvalReport { rows, fingerprint }, examples })
}

/// Published single-square results of other methods, kept as static
/// reference rows next to our own numbers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceResult {
    pub method: &'static str,
    pub dataset: &'static str,
    pub psnr: f64,
    pub ssim: Option<f64>,
}

pub const SINGLE_SQUARE_REFERENCES: [ReferenceResult; 6] = [
    ReferenceResult { method: "PiiGAN", dataset: "CelebA-HQ", psnr: 34.99, ssim: Some(0.99) },
    ReferenceResult { method: "DMFN", dataset: "CelebA", psnr: 26.50, ssim: Some(0.89) },
    ReferenceResult { method: "DMFN", dataset: "Paris StreetView", psnr: 25.00, ssim: Some(0.86) },
    ReferenceResult { method: "CE", dataset: "Paris StreetView", psnr: 18.58, ssim: None },
    ReferenceResult { method: "WGAIN", dataset: "CelebA", psnr: 25.96, ssim: Some(0.92) },
    ReferenceResult { method: "WGAIN", dataset: "Paris StreetView", psnr: 25.00, ssim: Some(0.88) },
];

/// One CSV line of the results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRecord {
    pub scenario: String,
    pub label: String,
    pub missing_fraction: f64,
    pub wgain_psnr: Option<f64>,
    pub wgain_ssim: f64,
    pub biharmonic_psnr: Option<f64>,
    pub biharmonic_ssim: f64,
    pub samples: usize,
    pub wgain_infinite_psnr: usize,
    pub biharmonic_infinite_psnr: usize,
}

pub fn table_records(report: &EvalReport) -> Vec<TableRecord> {
    report
        .rows
        .iter()
        .map(|r| TableRecord {
            scenario: r.name.clone(),
            label: r.scenario.label(),
            missing_fraction: r.mean_missing_fraction,
            wgain_psnr: r.wgain.mean_psnr,
            wgain_ssim: r.wgain.mean_ssim,
            biharmonic_psnr: r.biharmonic.mean_psnr,
            biharmonic_ssim: r.biharmonic.mean_ssim,
            samples: r.wgain.samples,
            wgain_infinite_psnr: r.wgain.infinite_psnr,
            biharmonic_infinite_psnr: r.biharmonic.infinite_psnr,
        })
        .collect()
}

pub fn write_csv(report: &EvalReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    for rec in table_records(report) {
        w.serialize(rec).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Vec<TableRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_error)?;
    r.deserialize().map(|rec| rec.map_err(csv_error)).collect()
}

pub fn write_reference_csv(path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_error)?;
    for r in SINGLE_SQUARE_REFERENCES {
        w.serialize(r).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::validation(format!("malformed table: {other:?}")),
    }
}

fn fmt_psnr(c: &CellStats) -> String {
    match c.mean_psnr {
        Some(v) => format!("{v:.2}"),
        None => "inf".into(),
    }
}

/// Aligned plain-text rendering with the reference appendix.
pub fn render_text(report: &EvalReport) -> String {
    let mut s = String::new();
    s.push_str(&format!(
        "{:<16} {:>8} | {:>12} {:>12} | {:>12} {:>12} | {:>5}\n",
        "Scenario", "missing", "WGAIN PSNR", "WGAIN SSIM", "Biharm PSNR", "Biharm SSIM", "N"
    ));
    s.push_str(&format!("{}\n", "-".repeat(92)));
    for r in &report.rows {
        s.push_str(&format!(
            "{:<16} {:>7.1}% | {:>12} {:>12.3} | {:>12} {:>12.3} | {:>5}\n",
            r.name,
            100.0 * r.mean_missing_fraction,
            fmt_psnr(&r.wgain),
            r.wgain.mean_ssim,
            fmt_psnr(&r.biharmonic),
            r.biharmonic.mean_ssim,
            r.wgain.samples
        ));
    }
    let fp = &report.fingerprint;
    s.push_str(&format!(
        "\ncheckpoint {}  seed {}  sigma {}  ssim window {}  fingerprint {}\n",
        &fp.checkpoint_hash[..16.min(fp.checkpoint_hash.len())],
        fp.seed,
        fp.sigma,
        fp.ssim.window,
        &fp.digest[..16.min(fp.digest.len())]
    ));
    s.push_str("\nPublished single-square results (reference only):\n");
    for r in SINGLE_SQUARE_REFERENCES {
        let ssim = r.ssim.map_or("-".to_string(), |v| format!("{v:.2}"));
        s.push_str(&format!("  {:<8} {:<18} PSNR {:>6.2}  SSIM {:>5}\n", r.method, r.dataset, r.psnr, ssim));
    }
    s
}

/// Writes `table.csv`, `table.txt`, `references.csv` and `report.json` into
/// `dir`.
pub fn write_table(report: &EvalReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_csv(report, &dir.join("table.csv"))?;
    write_reference_csv(&dir.join("references.csv"))?;
    std::fs::write(dir.join("table.txt"), render_text(report))?;
    std::fs::write(dir.join("report.json"), serde_json::to_vec_pretty(report)?)?;
    Ok(())
}

const PAD: u32 = 2;
const LABEL_H: u32 = 10;
/// Tiles narrower than the longest column label are enlarged by pixel
/// replication up to at least this width.
const MIN_TILE: u32 = 11 * 8;
pub const GRID_COLUMNS: [&str; 4] = ["truth", "damaged", "wgain", "biharmonic"];

/// Missing pixels rendered mid-gray.
pub fn damaged_view(truth: &ImageTensor, mask: &MaskMatrix) -> Result<ImageTensor> {
    truth.check_mask(mask)?;
    let mut out = truth.clone();
    for (px, &valid) in out.pixels_mut().chunks_exact_mut(3).zip(mask.bits()) {
        if valid == 0 {
            px.fill(0.5);
        }
    }
    Ok(out)
}

fn draw_text(canvas: &mut image::RgbImage, x0: u32, y0: u32, text: &str) {
    use font8x8::UnicodeFonts;
    for (i, ch) in text.chars().enumerate() {
        let Some(glyph) = font8x8::BASIC_FONTS.get(ch) else { continue };
        for (row, bits) in glyph.iter().enumerate() {
            for col in 0..8 {
                if bits & (1 << col) != 0 {
                    let (x, y) = (x0 + i as u32 * 8 + col, y0 + row as u32);
                    if x < canvas.width() && y < canvas.height() {
                        canvas.put_pixel(x, y, image::Rgb([0, 0, 0]));
                    }
                }
            }
        }
    }
}

/// Integer replication factor applied to tiles of width `w`.
fn tile_scale(w: u32) -> u32 {
    MIN_TILE.div_ceil(w.max(1)).max(1)
}

/// Lays out one row per example with columns truth / damaged / WGAIN /
/// biharmonic; each row carries its scenario label above the tiles. Small
/// images are enlarged by an integer factor without interpolation.
pub fn render_grid(rows: &[(String, Example)]) -> Result<image::RgbImage> {
    let Some((_, first)) = rows.first() else {
        return Err(Error::validation("grid needs at least one example"));
    };
    let scale = tile_scale(first.truth.width() as u32);
    let (th, tw) = (first.truth.height() as u32 * scale, first.truth.width() as u32 * scale);
    let width = GRID_COLUMNS.len() as u32 * (tw + PAD) + PAD;
    let height = LABEL_H + rows.len() as u32 * (LABEL_H + th + PAD) + PAD;
    let mut canvas = image::RgbImage::from_pixel(width, height, image::Rgb([255, 255, 255]));
    for (c, name) in GRID_COLUMNS.iter().enumerate() {
        draw_text(&mut canvas, PAD + c as u32 * (tw + PAD), 1, name);
    }
    for (r, (label, ex)) in rows.iter().enumerate() {
        let tiles = [ex.truth.clone(), damaged_view(&ex.truth, &ex.mask)?, ex.wgain.clone(), ex.biharmonic.clone()];
        let y0 = LABEL_H + r as u32 * (LABEL_H + th + PAD);
        draw_text(&mut canvas, PAD, y0 + 1, label);
        for (c, tile) in tiles.iter().enumerate() {
            tile.check_shape(&ex.truth)?;
            let rgb = image::imageops::resize(&tile.to_rgb8(), tw, th, image::imageops::FilterType::Nearest);
            image::imageops::replace(&mut canvas, &rgb, (PAD + c as u32 * (tw + PAD)) as i64, (y0 + LABEL_H) as i64);
        }
    }
    Ok(canvas)
}

pub fn save_grid(rows: &[(String, Example)], path: &Path) -> Result<()> {
    render_grid(rows)?.save(path)?;
    Ok(())
}

/// One grid per scenario, named after the scenario label.
pub fn save_grids(run: &EvalRun, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    for (row, exs) in run.report.rows.iter().zip(&run.examples) {
        if exs.is_empty() {
            continue;
        }
        let label = row.scenario.label();
        let items: Vec<(String, Example)> = exs.iter().map(|e| (label.clone(), e.clone())).collect();
        let path = dir.join(format!("grid-{label}.png"));
        save_grid(&items, &path)?;
        paths.push(path);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::make_synthetic_corpus;
    use crate::model::ModelConfig;

    fn setup() -> (WgainModel<f32>, Vec<ImageTensor>) {
        let s = SeedStreams::new(1);
        let model = WgainModel::new(&ModelConfig::tiny(), &mut s.stream("init")).unwrap();
        (model, make_synthetic_corpus(5, 8, &mut s.stream("data")).unwrap())
    }

    fn scenarios() -> Vec<EvalScenario> {
        EvalScenario::standard_set(8)
    }

    #[test]
    fn report_accounting() {
        let (model, imgs) = setup();
        let run = run_scenarios(&model, &imgs, &scenarios(), &EvalOptions::default()).unwrap();
        assert_eq!(run.report.rows.len(), 5);
        for r in &run.report.rows {
            assert_eq!(r.wgain.samples, 5);
            assert_eq!(r.biharmonic.samples, 5);
        }
        assert_eq!(run.examples[0].len(), 4);
    }

    #[test]
    fn identical_seeds_give_identical_reports() {
        let (model, imgs) = setup();
        let opts = EvalOptions { seed: 9, ..EvalOptions::default() };
        let a = run_scenarios(&model, &imgs, &scenarios(), &opts).unwrap();
        let b = run_scenarios(&model, &imgs, &scenarios(), &opts).unwrap();
        assert_eq!(serde_json::to_string(&a.report).unwrap(), serde_json::to_string(&b.report).unwrap());
    }

    #[test]
    fn means_ignore_eval_order_and_model_is_untouched() {
        let (model, mut imgs) = setup();
        let before = model_hash(&model);
        let a = run_scenarios(&model, &imgs, &scenarios(), &EvalOptions::default()).unwrap();
        imgs.reverse();
        let b = run_scenarios(&model, &imgs, &scenarios(), &EvalOptions::default()).unwrap();
        assert_eq!(a.report.rows, b.report.rows);
        assert_eq!(model_hash(&model), before);
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let (model, imgs) = setup();
        let run = run_scenarios(&model, &imgs, &scenarios(), &EvalOptions::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_table(&run.report, dir.path()).unwrap();
        let back = read_csv(&dir.path().join("table.csv")).unwrap();
        assert_eq!(back, table_records(&run.report));
        let names: Vec<_> = back.iter().map(|r| r.scenario.as_str()).collect();
        assert_eq!(names, ["Single square", "Multisquare", "Noise 50%", "Noise 75%", "Noise 95%"]);
        let text = std::fs::read_to_string(dir.path().join("table.txt")).unwrap();
        assert!(text.contains("DMFN") && text.contains("25.00"));
    }

    #[test]
    fn infinite_psnr_is_counted_not_averaged() {
        let c = cell(vec![f64::INFINITY, 20.0, 30.0], vec![1.0, 0.5, 0.5]);
        assert_eq!((c.mean_psnr, c.infinite_psnr, c.samples), (Some(25.0), 1, 3));
        assert_eq!(cell(vec![f64::INFINITY], vec![1.0]).mean_psnr, None);
    }

    #[test]
    fn grid_layout_and_unmodified_tiles() {
        let (model, imgs) = setup();
        let run = run_scenarios(&model, &imgs, &scenarios()[..1], &EvalOptions { grid_examples: 3, ..EvalOptions::default() }).unwrap();
        let rows: Vec<_> = run.examples[0].iter().map(|e| ("x".to_string(), e.clone())).collect();
        let grid = render_grid(&rows).unwrap();
        let k = tile_scale(8);
        assert_eq!(k, 11);
        assert_eq!(grid.width(), 4 * (8 * k + PAD) + PAD);
        assert_eq!(grid.height(), LABEL_H + 3 * (LABEL_H + 8 * k + PAD) + PAD);
        let truth = rows[1].1.truth.to_rgb8();
        let y0 = LABEL_H + (LABEL_H + 8 * k + PAD) + LABEL_H;
        for r in 0..8 * k {
            for c in 0..8 * k {
                assert_eq!(grid.get_pixel(PAD + c, y0 + r), truth.get_pixel(c / k, r / k));
            }
        }
    }

    #[test]
    fn damaged_view_grays_missing_pixels() {
        let img = ImageTensor::filled(4, 4, 1.0);
        let mut m = MaskMatrix::ones(4, 4);
        m.set(1, 2, false);
        let d = damaged_view(&img, &m).unwrap();
        assert_eq!(d.get(1, 2, 0), 0.5);
        assert_eq!(d.get(0, 0, 0), 1.0);
    }
}
