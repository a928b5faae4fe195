//! Acceptance gate. Every criterion prints one `PASS`/`FAIL` line to stderr
//! (written directly so it survives output capture) and then asserts.

use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use proptest::prelude::*;
use rand::Rng;
use serde::Deserialize;

use wgain_core::biharmonic::biharmonic_inpaint;
use wgain_core::corpus::make_synthetic_corpus;
use wgain_core::eval::{read_csv, run_scenarios, save_grid, write_table, EvalOptions, SINGLE_SQUARE_REFERENCES};
use wgain_core::mask::{
    gen_center_square_mask, gen_multi_square_mask_eval, gen_noise_mask, sample_training_mask, EvalScenario, ScenarioSpec,
    TrainScenarios,
};
use wgain_core::metrics::{psnr, psnr_values, ssim_with, SsimParams};
use wgain_core::model::{
    compose_output, feature_map_to_images, mask_image, sample_noise, Generator, ModelConfig, NoiseTensor, WgainModel,
};
use wgain_core::nn::ops::hard_sigmoid;
use wgain_core::nn::ParamSet;
use wgain_core::rng::SeedStreams;
use wgain_core::trainer::{
    critic_objective, generator_objective, recon_loss, sample_batch, train, Batch, ReconLoss, TrainConfig, Trainer,
};
use wgain_core::{ImageTensor, MaskMatrix};

fn report(id: &str, pass: bool, detail: &str) {
    let line = format!("acceptance {id}: {} ({detail})\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "{}", line.trim_end());
}

fn random_image(rng: &mut impl Rng, side: usize) -> ImageTensor {
    ImageTensor::from_fn(side, side, |_, _, _| rng.random_range(0.0..1.0))
}

fn random_mask(rng: &mut impl Rng, side: usize) -> MaskMatrix {
    let p = rng.random_range(0.0..1.0);
    gen_noise_mask(side, side, p, rng).unwrap()
}

fn artifacts() -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn c01_composition() {
    let mut rng = SeedStreams::new(1).stream("compose");
    let mut bad = 0;
    for _ in 0..1000 {
        let x = random_image(&mut rng, 32);
        let g = random_image(&mut rng, 32);
        let m = random_mask(&mut rng, 32);
        let out = compose_output(&g, &mask_image(&x, &m).unwrap(), &m).unwrap();
        for r in 0..32 {
            for c in 0..32 {
                let src = if m.is_valid(r, c) { &x } else { &g };
                for ch in 0..3 {
                    if out.get(r, c, ch).to_bits() != src.get(r, c, ch).to_bits() {
                        bad += 1;
                    }
                }
            }
        }
    }
    report("1 composition", bad == 0, &format!("1000 cases at 32x32, {bad} mismatching values"));
}

#[test]
fn c02_critic_clipping() {
    let images = make_synthetic_corpus(8, 32, &mut SeedStreams::new(2).stream("corpus")).unwrap();
    let model = WgainModel::new(&ModelConfig::desk_scale(32), &mut SeedStreams::new(2).stream("init")).unwrap();
    // A large step size pushes the weights against the bound on every step.
    let cfg = TrainConfig { alpha: 1e-2, batch: 4, ..TrainConfig::default() };
    let mut trainer = Trainer::new(model, cfg.clone()).unwrap();
    let streams = SeedStreams::new(2);
    let (mut mrng, mut zrng) = (streams.stream("masks"), streams.stream("noise"));
    let mut worst = 0.0f64;
    let mut at_bound = 0;
    for step in 0..200 {
        let chunk = &images[(step % 2) * 4..(step % 2) * 4 + 4];
        let batch = sample_batch(chunk, &cfg.scenarios, cfg.sigma, &mut mrng, &mut zrng).unwrap();
        trainer.critic_step(&batch).unwrap();
        let norm = trainer.model.critic.params.max_weight_norm();
        worst = worst.max(norm);
        if norm > 0.999 {
            at_bound += 1;
        }
        trainer.generator_step(&batch).unwrap();
    }
    report(
        "2 critic clipping",
        worst <= 1.0 + 1e-6,
        &format!("200 critic steps, max layer norm {worst:.9}, {at_bound} steps at the bound"),
    );
}

#[test]
fn c03_generator_range() {
    let side = 32;
    let generator =
        Generator::<f32>::new(ModelConfig::desk_scale(side).generator, &mut SeedStreams::new(3).stream("init")).unwrap();
    let mut rng = SeedStreams::new(3).stream("inputs");
    let (mut lo, mut hi) = (f32::INFINITY, f32::NEG_INFINITY);
    for i in 0..100 {
        let (img, sigma) = match i % 5 {
            0 => (ImageTensor::filled(side, side, 0.0), 0.1),
            1 => (ImageTensor::filled(side, side, 1.0), 0.1),
            2 => (random_image(&mut rng, side), 10.0),
            _ => (random_image(&mut rng, side), 0.1),
        };
        let mask = match i % 4 {
            0 => MaskMatrix::zeros(side, side),
            _ => random_mask(&mut rng, side),
        };
        let noise = sample_noise(side, side, sigma, &mut rng).unwrap();
        let batch = Batch::<f32>::new(&[img], &[mask], &[noise]).unwrap();
        let tape = generator.forward(&batch.input).unwrap();
        for &v in &tape.output.data {
            lo = lo.min(v);
            hi = hi.max(v);
        }
    }
    report("3 generator range", (0.0..=1.0).contains(&lo) && (0.0..=1.0).contains(&hi), &format!("100 inputs, outputs in [{lo}, {hi}]"));
}

#[test]
fn c04_hard_sigmoid() {
    // The definition evaluated directly in each precision.
    let reference64 = |x: f64| {
        if x < -2.5 {
            0.0
        } else if x > 2.5 {
            1.0
        } else {
            0.2 * x + 0.5
        }
    };
    let reference32 = |x: f32| {
        if x < -2.5 {
            0.0
        } else if x > 2.5 {
            1.0
        } else {
            0.2f32 * x + 0.5f32
        }
    };
    let mismatches = (0..=1000)
        .map(|i| -5.0 + 0.01 * i as f64)
        .filter(|&x| hard_sigmoid(x) != reference64(x) || hard_sigmoid(x as f32) != reference32(x as f32))
        .count();
    report("4 hard-sigmoid", mismatches == 0, &format!("1001 points on [-5, 5], {mismatches} mismatches"));
}

/// Central-difference check of `analytic` against `objective` on `count`
/// parameters of the set chosen by `select` that have a non-negligible
/// gradient. Returns the worst relative error and the number of
/// zero-gradient draws skipped.
fn check_gradient(
    model: &mut WgainModel<f64>,
    select: fn(&mut WgainModel<f64>) -> &mut ParamSet<f64>,
    analytic: &[f64],
    objective: &dyn Fn(&WgainModel<f64>) -> f64,
    rng: &mut impl Rng,
    count: usize,
) -> (f64, usize) {
    let h = 1e-4;
    let mut worst = 0.0f64;
    let (mut checked, mut skipped) = (0, 0);
    while checked < count {
        let i = rng.random_range(0..analytic.len());
        let (pi, off) = select(model).locate(i).unwrap();
        let orig = select(model).get(pi).value[off];
        select(model).get_mut(pi).value[off] = orig + h;
        let up = objective(model);
        select(model).get_mut(pi).value[off] = orig - h;
        let down = objective(model);
        select(model).get_mut(pi).value[off] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[i];
        let scale = a.abs().max(numeric.abs());
        if scale < 1e-10 {
            skipped += 1;
            continue;
        }
        worst = worst.max((a - numeric).abs() / scale);
        checked += 1;
    }
    (worst, skipped)
}

fn tiny_batch(seed: u64) -> Batch<f64> {
    let mut rng = SeedStreams::new(seed).stream("batch");
    let images: Vec<_> = (0..3).map(|_| random_image(&mut rng, 8)).collect();
    let masks: Vec<_> = (0..3).map(|_| gen_noise_mask(8, 8, 0.6, &mut rng).unwrap()).collect();
    let noise: Vec<_> = (0..3).map(|_| sample_noise(8, 8, 0.1, &mut rng).unwrap()).collect();
    Batch::new(&images, &masks, &noise).unwrap()
}

#[test]
fn c05_gradient_check() {
    let model = WgainModel::<f64>::new(&ModelConfig::tiny(), &mut SeedStreams::new(5).stream("init")).unwrap();
    let batch = tiny_batch(5);
    // Both adversarial and reconstruction terms carry weight.
    let cfg = TrainConfig { lambda_f: 1.0, lambda_g: 1.0, lambda_mae: 1.0, recon_loss: ReconLoss::Mae, ..TrainConfig::default() };
    let mut rng = SeedStreams::new(5).stream("pick");

    let tape = model.generator.forward(&batch.input).unwrap();
    let analytic_f: Vec<f64> = critic_objective(&model, &batch, &tape, &cfg).unwrap().grads.iter().flatten().copied().collect();
    let analytic_g: Vec<f64> = generator_objective(&model, &batch, &tape, &cfg).unwrap().grads.iter().flatten().copied().collect();

    let mut model = model;
    let (err_f, skip_f) = check_gradient(
        &mut model,
        |m| &mut m.critic.params,
        &analytic_f,
        &|m| critic_objective(m, &batch, &tape, &cfg).unwrap().objective,
        &mut rng,
        20,
    );
    let (err_g, skip_g) = check_gradient(
        &mut model,
        |m| &mut m.generator.params,
        &analytic_g,
        &|m| {
            let t = m.generator.forward(&batch.input).unwrap();
            generator_objective(m, &batch, &t, &cfg).unwrap().objective
        },
        &mut rng,
        20,
    );
    report(
        "5 gradient check",
        err_f <= 1e-3 && err_g <= 1e-3,
        &format!("20+20 parameters, step 1e-4, max rel err J(f) {err_f:.2e}, J(g) {err_g:.2e}, zero-gradient draws skipped {skip_f}/{skip_g}"),
    );
}

#[test]
fn c06_mask_statistics() {
    let side = 128;
    let mut details = Vec::new();
    let mut pass = true;
    for p in [0.5, 0.75, 0.95] {
        let mut rng = SeedStreams::new(6).stream(&format!("noise-{p}"));
        let mean = (0..1000).map(|_| gen_noise_mask(side, side, p, &mut rng).unwrap().missing_fraction()).sum::<f64>() / 1000.0;
        pass &= (mean - p).abs() <= 0.002;
        details.push(format!("noise {p}: {mean:.5}"));
    }
    let center = gen_center_square_mask(side, side, 64).unwrap().missing_fraction();
    pass &= center == 0.25;
    details.push(format!("center 64/128: {center}"));
    let mut rng = SeedStreams::new(6).stream("multi");
    let worst = (0..1000)
        .map(|_| gen_multi_square_mask_eval(side, side, 5, 31, &mut rng).unwrap().missing_fraction())
        .fold(0.0, f64::max);
    pass &= worst <= 0.2933;
    details.push(format!("multi-square max {worst:.4}"));
    report("6 mask statistics", pass, &details.join(", "));
}

/// Direct windowed SSIM: explicit loops and two-pass moments per window.
fn naive_ssim(x: &ImageTensor, y: &ImageTensor, win: usize) -> f64 {
    let (c1, c2) = ((0.01f64).powi(2), (0.03f64).powi(2));
    let n = (win * win) as f64;
    let mut per_channel = Vec::new();
    for ch in 0..3 {
        let mut total = 0.0;
        let mut windows = 0;
        for r0 in 0..=x.height() - win {
            for c0 in 0..=x.width() - win {
                let mut xs = Vec::new();
                let mut ys = Vec::new();
                for r in r0..r0 + win {
                    for c in c0..c0 + win {
                        xs.push(x.get(r, c, ch) as f64);
                        ys.push(y.get(r, c, ch) as f64);
                    }
                }
                let mx = xs.iter().sum::<f64>() / n;
                let my = ys.iter().sum::<f64>() / n;
                let vx = xs.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / (n - 1.0);
                let vy = ys.iter().map(|v| (v - my).powi(2)).sum::<f64>() / (n - 1.0);
                let cov = xs.iter().zip(&ys).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / (n - 1.0);
                total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                windows += 1;
            }
        }
        per_channel.push(total / windows as f64);
    }
    per_channel.iter().sum::<f64>() / 3.0
}

#[derive(Deserialize)]
struct SsimFixture {
    side: usize,
    pairs: Vec<SsimPair>,
}

#[derive(Deserialize)]
struct SsimPair {
    k: usize,
    ssim: f64,
}

#[test]
fn c07_metric_oracles() {
    let zeros = vec![0.0f64; 3 * 32 * 32];
    let ones = vec![1.0f64; zeros.len()];
    let tenth = vec![0.1f64; zeros.len()];
    let p0 = psnr_values(&zeros, &ones).unwrap();
    let p20 = psnr_values(&zeros, &tenth).unwrap();
    let img0 = psnr(&ImageTensor::filled(32, 32, 0.0), &ImageTensor::filled(32, 32, 1.0)).unwrap();
    let identical = psnr(&ImageTensor::filled(4, 4, 0.3), &ImageTensor::filled(4, 4, 0.3)).unwrap();
    let psnr_ok = (p0 - 0.0).abs() <= 1e-9 && (p20 - 20.0).abs() <= 1e-9 && img0.abs() <= 1e-9 && identical == f64::INFINITY;

    let params = SsimParams::default();
    let mut rng = SeedStreams::new(7).stream("ssim");
    let mut worst = 0.0f64;
    for i in 0..50 {
        let side = [16, 23, 32][i % 3];
        let x = random_image(&mut rng, side);
        // Correlated partner so the structure term is far from zero.
        let noise = random_image(&mut rng, side);
        let t = rng.random_range(0.0..1.0f32);
        let y = ImageTensor::from_fn(side, side, |r, c, ch| (1.0 - t) * x.get(r, c, ch) + t * noise.get(r, c, ch));
        worst = worst.max((ssim_with(&x, &y, &params).unwrap() - naive_ssim(&x, &y, 7)).abs());
    }

    let fixture: SsimFixture =
        serde_json::from_str(include_str!("fixtures/ssim_reference.json")).expect("ssim fixture parses");
    let mut worst_fixture = 0.0f64;
    for pair in &fixture.pairs {
        let k = pair.k;
        let a = |r: usize, c: usize, ch: usize| (r * (31 + k) + c * (57 + 2 * k) + ch * 11 + r * c * k) % 256;
        let b = |r: usize, c: usize, ch: usize| (r * (13 + k) + c * (29 + k) + ch * 7 + (r + c) * (c + k)) % 256;
        let x = ImageTensor::from_fn(fixture.side, fixture.side, |r, c, ch| a(r, c, ch) as f32 / 255.0);
        let y = ImageTensor::from_fn(fixture.side, fixture.side, |r, c, ch| ((a(r, c, ch) + b(r, c, ch)) / 2) as f32 / 255.0);
        worst_fixture = worst_fixture.max((ssim_with(&x, &y, &params).unwrap() - pair.ssim).abs());
    }
    report(
        "7 metric oracles",
        psnr_ok && worst <= 1e-6 && worst_fixture <= 1e-6,
        &format!(
            "PSNR 0 dB -> {p0:e}, 20 dB -> {p20:.12}; SSIM max diff vs direct {worst:.2e} on 50 pairs, vs scikit-image fixture {worst_fixture:.2e}"
        ),
    );
}

#[derive(Deserialize)]
struct BiharmonicFixture {
    side: usize,
    filled: Vec<(usize, usize, f64)>,
}

#[test]
fn c08_biharmonic_exactness() {
    let side = 32;
    let affine = ImageTensor::from_fn(side, side, |r, c, ch| (0.2 + 0.012 * r as f64 + 0.009 * c as f64 + 0.05 * ch as f64) as f32);
    // Affine reproduction holds for holes at least two pixels from the border.
    let mut disk = MaskMatrix::ones(side, side);
    let mut square = MaskMatrix::ones(side, side);
    square.punch_rect(8, 10, 14, 12);
    let mut rng = SeedStreams::new(8).stream("holes");
    let mut scattered = MaskMatrix::ones(side, side);
    for r in 0..side {
        for c in 0..side {
            if (r as f64 - 15.5).powi(2) + (c as f64 - 14.0).powi(2) <= 81.0 {
                disk.set(r, c, false);
            }
            if (2..side - 2).contains(&r) && (2..side - 2).contains(&c) && rng.random_bool(0.7) {
                scattered.set(r, c, false);
            }
        }
    }
    let (mut fill_err, mut valid_changed) = (0.0f64, 0usize);
    for m in [&disk, &square, &scattered] {
        let out = biharmonic_inpaint(&mask_image(&affine, m).unwrap(), m).unwrap();
        for r in 0..side {
            for c in 0..side {
                for ch in 0..3 {
                    if m.is_valid(r, c) {
                        valid_changed += (out.get(r, c, ch).to_bits() != affine.get(r, c, ch).to_bits()) as usize;
                    } else {
                        fill_err = fill_err.max((out.get(r, c, ch) as f64 - affine.get(r, c, ch) as f64).abs());
                    }
                }
            }
        }
    }

    let fixture: BiharmonicFixture =
        serde_json::from_str(include_str!("fixtures/biharmonic_reference.json")).expect("biharmonic fixture parses");
    let n = fixture.side;
    let value = |r: usize, c: usize| ((r * 37 + c * 91 + r * c * 13) % 256) as f32 / 255.0;
    let img = ImageTensor::from_fn(n, n, |r, c, _| value(r, c));
    let mut m = MaskMatrix::ones(n, n);
    for &(r, c, _) in &fixture.filled {
        m.set(r, c, false);
    }
    let out = biharmonic_inpaint(&mask_image(&img, &m).unwrap(), &m).unwrap();
    let reference_err = fixture
        .filled
        .iter()
        .flat_map(|&(r, c, v)| (0..3).map(move |ch| (r, c, ch, v)))
        .map(|(r, c, ch, v)| (out.get(r, c, ch) as f64 - v.clamp(0.0, 1.0)).abs())
        .fold(0.0, f64::max);

    report(
        "8 biharmonic exactness",
        fill_err <= 1e-6 && valid_changed == 0 && reference_err <= 1e-5,
        &format!(
            "affine fill max err {fill_err:.2e} over disk/square/scattered holes, {valid_changed} valid values changed, max diff vs scikit-image fixture {reference_err:.2e}"
        ),
    );
}

/// Criteria 9, 10 and the reporting contract share one desk-scale run.
#[test]
fn c09_c10_desk_training_and_reporting() {
    let side = 32;
    let images = make_synthetic_corpus(16, side, &mut SeedStreams::new(2024).stream("corpus")).unwrap();
    let model_config = ModelConfig::desk_scale(side);
    let cfg = TrainConfig { batch: 8, alpha: 1e-3, epochs: 100_000, max_steps: Some(3000), seed: 7, ..TrainConfig::default() };
    let started = Instant::now();
    let outcome = train(&images, &model_config, &cfg, None, |_| {}).unwrap();
    let minutes = started.elapsed().as_secs_f64() / 60.0;
    let model = outcome.model;

    // Final recon loss: the trained generator on every training image under
    // fixed draws from the training mask mixture.
    let streams = SeedStreams::new(99);
    let spec = ScenarioSpec::Train(TrainScenarios::default());
    let (mut final_recon, mut mean_fill_recon) = (0.0, 0.0);
    let repeats = 4;
    for rep in 0..repeats {
        let masks: Vec<_> = (0..images.len())
            .map(|i| sample_training_mask(&spec, side, side, &mut streams.indexed("masks", (rep * 100 + i) as u64)).unwrap())
            .collect();
        let noise: Vec<NoiseTensor> = (0..images.len())
            .map(|i| sample_noise(side, side, cfg.sigma, &mut streams.indexed("noise", (rep * 100 + i) as u64)).unwrap())
            .collect();
        let batch = Batch::<f32>::new(&images, &masks, &noise).unwrap();
        let tape = model.generator.forward(&batch.input).unwrap();
        let composed: Vec<_> = feature_map_to_images(&tape.output)
            .iter()
            .zip(images.iter().zip(&masks))
            .map(|(g, (x, m))| compose_output(g, &mask_image(x, m).unwrap(), m).unwrap())
            .collect();
        let fm = |imgs: &[ImageTensor]| wgain_core::model::images_to_feature_map::<f32>(imgs);
        final_recon += recon_loss(&fm(&composed), &batch.x, ReconLoss::Mae).0 / repeats as f64;
        // Reference point: every missing pixel filled with the image mean.
        let mean_filled: Vec<_> = images
            .iter()
            .zip(&masks)
            .map(|(x, m)| {
                let mean = x.pixels().iter().map(|&v| v as f64).sum::<f64>() / x.pixels().len() as f64;
                compose_output(&ImageTensor::filled(side, side, mean as f32), &mask_image(x, m).unwrap(), m).unwrap()
            })
            .collect();
        mean_fill_recon += recon_loss(&fm(&mean_filled), &batch.x, ReconLoss::Mae).0 / repeats as f64;
    }
    let tail = &outcome.log[outcome.log.len().saturating_sub(100)..];
    let trailing = tail.iter().map(|r| r.recon_loss_value).sum::<f64>() / tail.len() as f64;

    let opts = EvalOptions { seed: 11, grid_examples: 4, ..EvalOptions::default() };
    let run = run_scenarios(&model, &images, &EvalScenario::standard_set(side), &opts).unwrap();
    let dir = artifacts();
    for (row, examples) in run.report.rows.iter().zip(&run.examples) {
        let labelled: Vec<_> = examples.iter().enumerate().map(|(i, e)| (format!("#{i}"), e.clone())).collect();
        save_grid(&labelled, &dir.join(format!("grid-{}.png", row.scenario.label()))).unwrap();
    }
    report(
        "9 overfit",
        final_recon < 0.02 && minutes < 30.0,
        &format!(
            "{} steps in {minutes:.1} min; final recon {final_recon:.4} (mean-fill {mean_fill_recon:.4}), trailing-100 training recon {trailing:.4}; grids in {}",
            outcome.steps,
            dir.display()
        ),
    );

    // Criterion 10 on the same masks for both methods, plus the masked-region view.
    let noise95 = run.report.rows.iter().find(|r| r.scenario == EvalScenario::Noise { p: 0.95 }).unwrap();
    let (w, b) = (noise95.wgain.mean_psnr.unwrap_or(f64::INFINITY), noise95.biharmonic.mean_psnr.unwrap_or(f64::INFINITY));
    let (mut wm, mut bm) = (0.0, 0.0);
    for (i, img) in images.iter().enumerate() {
        let m = EvalScenario::Noise { p: 0.95 }.sample(side, side, &mut streams.indexed("noise95", i as u64)).unwrap();
        let z = sample_noise(side, side, cfg.sigma, &mut streams.indexed("z95", i as u64)).unwrap();
        let g = model.generator.inpaint(img, &m, &z).unwrap();
        let bh = biharmonic_inpaint(&mask_image(img, &m).unwrap(), &m).unwrap();
        let missing = |t: &ImageTensor| -> Vec<f64> {
            (0..side * side).filter(|&p| !m.is_valid(p / side, p % side)).flat_map(|p| (0..3).map(move |ch| (p, ch))).map(|(p, ch)| t.get(p / side, p % side, ch) as f64).collect()
        };
        wm += psnr_values(&missing(img), &missing(&g)).unwrap() / images.len() as f64;
        bm += psnr_values(&missing(img), &missing(&bh)).unwrap() / images.len() as f64;
    }
    report(
        "10 beat the baseline",
        w > b && wm > bm,
        &format!("noise-95 mean PSNR WGAIN {w:.2} dB vs biharmonic {b:.2} dB; masked-region {wm:.2} vs {bm:.2} dB"),
    );

    let table_dir = dir.join("table");
    write_table(&run.report, &table_dir).unwrap();
    let records = read_csv(&table_dir.join("table.csv")).unwrap();
    let names: Vec<_> = records.iter().map(|r| r.scenario.as_str()).collect();
    let header = std::fs::read_to_string(table_dir.join("table.csv")).unwrap().lines().next().unwrap().to_string();
    let references = std::fs::read_to_string(table_dir.join("references.csv")).unwrap();
    let expected_refs = "method,dataset,psnr,ssim\nPiiGAN,CelebA-HQ,34.99,0.99\nDMFN,CelebA,26.5,0.89\nDMFN,Paris StreetView,25.0,0.86\nCE,Paris StreetView,18.58,\nWGAIN,CelebA,25.96,0.92\nWGAIN,Paris StreetView,25.0,0.88\n";
    let structure_ok = names == ["Single square", "Multisquare", "Noise 50%", "Noise 75%", "Noise 95%"]
        && ["wgain_psnr", "wgain_ssim", "biharmonic_psnr", "biharmonic_ssim"].iter().all(|c| header.split(',').any(|h| h == *c))
        && records.iter().all(|r| r.wgain_psnr.is_some() && r.biharmonic_psnr.is_some() && r.samples == images.len());
    report(
        "reporting",
        structure_ok && references == expected_refs && SINGLE_SQUARE_REFERENCES.len() == 6,
        &format!("table rows {names:?}, {} reference rows", references.lines().count() - 1),
    );
    let _ = std::io::stderr().write_all(b"acceptance 11 long run: SKIP (documented, not part of CI)\n");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rle_round_trips(h in 1usize..24, w in 1usize..24, bits in proptest::collection::vec(0u8..2, 576)) {
        let m = MaskMatrix::from_bits(h, w, bits[..h * w].to_vec()).unwrap();
        prop_assert_eq!(MaskMatrix::from_rle(&m.to_rle()).unwrap(), m);
    }

    #[test]
    fn composition_keeps_valid_pixels(seed in any::<u64>(), side in 1usize..12) {
        let mut rng = SeedStreams::new(seed).stream("p");
        let x = random_image(&mut rng, side);
        let g = random_image(&mut rng, side);
        let m = random_mask(&mut rng, side);
        let out = compose_output(&g, &mask_image(&x, &m).unwrap(), &m).unwrap();
        for r in 0..side {
            for c in 0..side {
                let src = if m.is_valid(r, c) { &x } else { &g };
                for ch in 0..3 {
                    prop_assert_eq!(out.get(r, c, ch).to_bits(), src.get(r, c, ch).to_bits());
                }
            }
        }
    }

    #[test]
    fn psnr_is_symmetric_and_nonnegative_in_range(seed in any::<u64>()) {
        let mut rng = SeedStreams::new(seed).stream("q");
        let x = random_image(&mut rng, 6);
        let y = random_image(&mut rng, 6);
        let a = psnr(&x, &y).unwrap();
        prop_assert_eq!(a, psnr(&y, &x).unwrap());
        prop_assert!(a >= 0.0);
    }
}
