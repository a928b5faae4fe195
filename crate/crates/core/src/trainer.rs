//! Alternating critic/generator optimization.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::mask::{draw_training_mask, MaskMatrix, ScenarioSpec, TrainScenarios};
use crate::model::{
    generator_input, images_to_feature_map, mask_image, mask_noise, masks_to_feature_map, sample_noise, GeneratorTape,
    ModelConfig, NoiseTensor, WgainModel,
};
use crate::nn::{Adam, AdamConfig, FeatureMap, Grads, Real};
use crate::rng::SeedStreams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReconLoss {
    #[default]
    Mae,
    Mse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub alpha: f64,
    pub batch: usize,
    pub lambda_f: f64,
    pub lambda_g: f64,
    pub lambda_mae: f64,
    pub epochs: usize,
    /// Stop after this many steps even if epochs remain.
    pub max_steps: Option<u64>,
    pub sigma: f64,
    pub clip_norm: f64,
    pub recon_loss: ReconLoss,
    pub seed: u64,
    /// 0 disables periodic checkpoints; the final one is always written.
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub scenarios: TrainScenarios,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 5e-5,
            batch: 32,
            lambda_f: 1.0,
            lambda_g: 0.005,
            lambda_mae: 1.0,
            epochs: 2000,
            max_steps: None,
            sigma: 0.1,
            clip_norm: 1.0,
            recon_loss: ReconLoss::Mae,
            seed: 0,
            checkpoint_every: 1000,
            log_every: 10,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            scenarios: TrainScenarios::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.alpha,
            self.lambda_f,
            self.lambda_g,
            self.lambda_mae,
            self.sigma,
            self.clip_norm,
            self.adam_beta1,
            self.adam_beta2,
            self.adam_epsilon,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("training hyperparameters must be finite"));
        }
        if self.alpha <= 0.0 {
            return Err(Error::validation(format!("learning rate {} must be positive", self.alpha)));
        }
        if self.batch == 0 {
            return Err(Error::validation("batch size must be at least 1"));
        }
        if self.lambda_f < 0.0 || self.lambda_g < 0.0 || self.lambda_mae < 0.0 {
            return Err(Error::validation("loss weights must be non-negative"));
        }
        if self.sigma <= 0.0 {
            return Err(Error::validation("noise sigma must be positive"));
        }
        if self.clip_norm <= 0.0 {
            return Err(Error::validation("clip norm must be positive"));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || self.adam_epsilon < 0.0 {
            return Err(Error::validation("Adam betas must lie in [0, 1) and epsilon must be non-negative"));
        }
        if self.log_every == 0 {
            return Err(Error::validation("log_every must be at least 1"));
        }
        self.scenarios.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { learning_rate: self.alpha, beta1: self.adam_beta1, beta2: self.adam_beta2, epsilon: self.adam_epsilon }
    }

    pub fn steps_per_epoch(&self, corpus_len: usize) -> usize {
        corpus_len.div_ceil(self.batch)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub critic_objective: f64,
    pub generator_objective: f64,
    pub recon_loss_value: f64,
    /// Seconds spent in the step.
    pub wall_time: f64,
}

impl StepReport {
    pub fn is_finite(&self) -> bool {
        self.critic_objective.is_finite() && self.generator_objective.is_finite() && self.recon_loss_value.is_finite()
    }
}

/// One mini-batch of ground truth, masks and noise, packed for the networks.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    /// Ground truth `[3, N, H, W]`.
    pub x: FeatureMap<T>,
    /// Masks `[1, N, H, W]`.
    pub m: FeatureMap<T>,
    /// Generator input `(x̃, z̃, M)`, `[7, N, H, W]`.
    pub input: FeatureMap<T>,
}

impl<T: Real> Batch<T> {
    pub fn new(images: &[ImageTensor], masks: &[MaskMatrix], noise: &[NoiseTensor]) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        let x_tilde = images.iter().zip(masks).map(|(x, m)| mask_image(x, m)).collect::<Result<Vec<_>>>()?;
        let z_tilde = noise.iter().zip(masks).map(|(z, m)| mask_noise(z, m)).collect::<Result<Vec<_>>>()?;
        let input = generator_input(&x_tilde, &z_tilde, masks)?;
        Ok(Self { x: images_to_feature_map(images), m: masks_to_feature_map(masks), input })
    }

    pub fn len(&self) -> usize {
        self.x.batch
    }

    pub fn is_empty(&self) -> bool {
        self.x.batch == 0
    }
}

/// `x̂ = M ? x : g`, elementwise over a packed batch.
pub fn compose_batch<T: Real>(g: &FeatureMap<T>, x: &FeatureMap<T>, m: &FeatureMap<T>) -> FeatureMap<T> {
    let mut out = x.clone();
    let plane = m.data.len();
    for c in 0..out.channels {
        let range = c * plane..(c + 1) * plane;
        for ((dst, &src), &valid) in out.data[range.clone()].iter_mut().zip(&g.data[range]).zip(&m.data) {
            if valid == T::zero() {
                *dst = src;
            }
        }
    }
    out
}

fn concat_batch<T: Real>(a: &FeatureMap<T>, b: &FeatureMap<T>) -> FeatureMap<T> {
    let mut out = FeatureMap::zeros(a.channels, a.batch + b.batch, a.height, a.width);
    let (la, lb) = (a.channel_len(), b.channel_len());
    for c in 0..a.channels {
        let dst = &mut out.data[c * (la + lb)..(c + 1) * (la + lb)];
        dst[..la].copy_from_slice(&a.data[c * la..(c + 1) * la]);
        dst[la..].copy_from_slice(&b.data[c * lb..(c + 1) * lb]);
    }
    out
}

fn mean<T: Real>(v: &[T]) -> f64 {
    v.iter().map(|s| s.as_f64()).sum::<f64>() / v.len() as f64
}

/// Mean reconstruction error over every element, and its gradient.
pub fn recon_loss<T: Real>(x_hat: &FeatureMap<T>, x: &FeatureMap<T>, kind: ReconLoss) -> (f64, Vec<T>) {
    let n = x.data.len() as f64;
    let scale = T::of(1.0 / n);
    let mut total = 0.0;
    let grad = x_hat
        .data
        .iter()
        .zip(&x.data)
        .map(|(&a, &b)| {
            let d = a - b;
            match kind {
                ReconLoss::Mae => {
                    total += d.abs().as_f64();
                    // Subgradient with sign(0) = 0.
                    if d > T::zero() {
                        scale
                    } else if d < T::zero() {
                        -scale
                    } else {
                        T::zero()
                    }
                }
                ReconLoss::Mse => {
                    total += (d * d).as_f64();
                    T::of(2.0) * d * scale
                }
            }
        })
        .collect();
    (total / n, grad)
}

/// Value of the critic objective `λ_f·(mean f(x̂, M) − mean f(x, M))` and its
/// parameter gradient.
#[derive(Debug, Clone)]
pub struct CriticEval<T> {
    pub objective: f64,
    pub fake_mean: f64,
    pub recon: f64,
    pub grads: Grads<T>,
}

pub fn critic_objective<T: Real>(
    model: &WgainModel<T>,
    batch: &Batch<T>,
    tape: &GeneratorTape<T>,
    cfg: &TrainConfig,
) -> Result<CriticEval<T>> {
    let x_hat = compose_batch(&tape.output, &batch.x, &batch.m);
    let fake = FeatureMap::concat(&[&x_hat, &batch.m]);
    let real = FeatureMap::concat(&[&batch.x, &batch.m]);
    let both = concat_batch(&fake, &real);
    let ctape = model.critic.forward(&both)?;
    let b = batch.len();
    let (fake_scores, real_scores) = ctape.scores.split_at(b);
    let fake_mean = mean(fake_scores);
    let objective = cfg.lambda_f * (fake_mean - mean(real_scores));
    let w = cfg.lambda_f / b as f64;
    let d_scores: Vec<T> = (0..2 * b).map(|i| T::of(if i < b { w } else { -w })).collect();
    let (grads, _) = model.critic.backward(&ctape, &d_scores, false);
    let (recon, _) = recon_loss(&x_hat, &batch.x, cfg.recon_loss);
    Ok(CriticEval { objective, fake_mean, recon, grads })
}

/// Value of the generator objective `−λ_g·mean f(x̂, M) + λ_mae·recon(x̂, x)`
/// and its parameter gradient.
#[derive(Debug, Clone)]
pub struct GeneratorEval<T> {
    pub objective: f64,
    pub recon: f64,
    pub grads: Grads<T>,
}

pub fn generator_objective<T: Real>(
    model: &WgainModel<T>,
    batch: &Batch<T>,
    tape: &GeneratorTape<T>,
    cfg: &TrainConfig,
) -> Result<GeneratorEval<T>> {
    let x_hat = compose_batch(&tape.output, &batch.x, &batch.m);
    let b = batch.len();
    let (recon, recon_grad) = recon_loss(&x_hat, &batch.x, cfg.recon_loss);
    let mut d_xhat: Vec<T> = recon_grad.into_iter().map(|g| g * T::of(cfg.lambda_mae)).collect();
    let mut fake_mean = 0.0;
    let ctape = model.critic.forward(&FeatureMap::concat(&[&x_hat, &batch.m]))?;
    fake_mean += mean(&ctape.scores);
    if cfg.lambda_g != 0.0 {
        let d_scores = vec![T::of(-cfg.lambda_g / b as f64); b];
        let (_, d_in) = model.critic.backward(&ctape, &d_scores, true);
        let d_in = d_in.expect("input gradient requested");
        for (d, &g) in d_xhat.iter_mut().zip(&d_in.data[..3 * d_in.channel_len()]) {
            *d += g;
        }
    }
    // Only missing pixels of x̂ depend on the generator.
    let plane = batch.m.data.len();
    for (i, d) in d_xhat.iter_mut().enumerate() {
        if batch.m.data[i % plane] != T::zero() {
            *d = T::zero();
        }
    }
    let d_out = FeatureMap { data: d_xhat, ..tape.output.clone() };
    let grads = model.generator.backward(tape, &d_out);
    let objective = -cfg.lambda_g * fake_mean + cfg.lambda_mae * recon;
    Ok(GeneratorEval { objective, recon, grads })
}

/// Model plus optimizer state; owns the only mutable copy of the parameters.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: WgainModel<f32>,
    critic_opt: Adam<f32>,
    generator_opt: Adam<f32>,
    step: u64,
}

impl Trainer {
    /// Critic weights are projected onto the clipping ball immediately, so
    /// every critic the trainer exposes satisfies the constraint.
    pub fn new(mut model: WgainModel<f32>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        model.critic.clip_weights(config.clip_norm);
        let critic_opt = Adam::new(config.adam(), &model.critic.params);
        let generator_opt = Adam::new(config.adam(), &model.generator.params);
        Ok(Self { config, model, critic_opt, generator_opt, step: 0 })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    fn forward(&self, batch: &Batch<f32>) -> Result<GeneratorTape<f32>> {
        self.model.generator.forward(&batch.input)
    }

    fn critic_update(&mut self, batch: &Batch<f32>, tape: &GeneratorTape<f32>, started: Instant) -> Result<StepReport> {
        let eval = critic_objective(&self.model, batch, tape, &self.config)?;
        let report = StepReport {
            step: self.step,
            critic_objective: eval.objective,
            generator_objective: -self.config.lambda_g * eval.fake_mean + self.config.lambda_mae * eval.recon,
            recon_loss_value: eval.recon,
            wall_time: started.elapsed().as_secs_f64(),
        };
        if !report.is_finite() || !eval.grads.all_finite() {
            return Err(Error::Divergence(Box::new(report)));
        }
        self.critic_opt.update(&mut self.model.critic.params, &eval.grads);
        self.model.critic.clip_weights(self.config.clip_norm);
        Ok(report)
    }

    fn generator_update(&mut self, batch: &Batch<f32>, tape: &GeneratorTape<f32>, started: Instant) -> Result<StepReport> {
        let eval = generator_objective(&self.model, batch, tape, &self.config)?;
        let report = StepReport {
            step: self.step,
            critic_objective: f64::NAN,
            generator_objective: eval.objective,
            recon_loss_value: eval.recon,
            wall_time: started.elapsed().as_secs_f64(),
        };
        if !eval.objective.is_finite() || !eval.recon.is_finite() || !eval.grads.all_finite() {
            return Err(Error::Divergence(Box::new(report)));
        }
        self.generator_opt.update(&mut self.model.generator.params, &eval.grads);
        Ok(report)
    }

    /// One Adam update of the critic followed by weight clipping.
    pub fn critic_step(&mut self, batch: &Batch<f32>) -> Result<StepReport> {
        let started = Instant::now();
        let tape = self.forward(batch)?;
        self.critic_update(batch, &tape, started)
    }

    /// One Adam update of the generator. The report's critic objective is
    /// not evaluated and is NaN.
    pub fn generator_step(&mut self, batch: &Batch<f32>) -> Result<StepReport> {
        let started = Instant::now();
        let tape = self.forward(batch)?;
        self.generator_update(batch, &tape, started)
    }

    /// A critic step then a generator step on the same batch. The critic
    /// update leaves the generator untouched, so its forward pass is reused.
    pub fn train_step(&mut self, batch: &Batch<f32>) -> Result<StepReport> {
        let started = Instant::now();
        let tape = self.forward(batch)?;
        let critic = self.critic_update(batch, &tape, started)?;
        let generator = self.generator_update(batch, &tape, started)?;
        self.step += 1;
        Ok(StepReport {
            step: self.step,
            critic_objective: critic.critic_objective,
            generator_objective: generator.generator_objective,
            recon_loss_value: generator.recon_loss_value,
            wall_time: started.elapsed().as_secs_f64(),
        })
    }
}

/// Draws a fresh mask and noise tensor for every image.
pub fn sample_batch(
    images: &[ImageTensor],
    scenarios: &TrainScenarios,
    sigma: f64,
    mask_rng: &mut impl rand::Rng,
    noise_rng: &mut impl rand::Rng,
) -> Result<Batch<f32>> {
    let spec = ScenarioSpec::Train(*scenarios);
    let mut masks = Vec::with_capacity(images.len());
    let mut noise = Vec::with_capacity(images.len());
    for img in images {
        let (_, m) = draw_training_mask(&spec, img.height(), img.width(), mask_rng)?;
        masks.push(m);
        noise.push(sample_noise(img.height(), img.width(), sigma, noise_rng)?);
    }
    Batch::new(images, &masks, &noise)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: WgainModel<f32>,
    pub log: Vec<StepReport>,
    pub steps: u64,
    /// Directory of the final checkpoint when an output directory was given.
    pub final_checkpoint: Option<PathBuf>,
}

pub const METRICS_LOG: &str = "metrics.jsonl";
pub const FINAL_CHECKPOINT: &str = "final";
pub const LAST_GOOD_CHECKPOINT: &str = "last-good";

fn append_record(file: &mut Option<std::fs::File>, report: &StepReport) -> Result<()> {
    if let Some(f) = file {
        writeln!(f, "{}", serde_json::to_string(report)?)?;
    }
    Ok(())
}

/// Runs the epoch loop over `images`. With `out_dir`, a line-delimited
/// metrics log and checkpoints are written there. `on_step` sees every step.
pub fn train(
    images: &[ImageTensor],
    model_config: &ModelConfig,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    mut on_step: impl FnMut(&StepReport),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    model_config.validate()?;
    if images.is_empty() {
        return Err(Error::validation("training corpus is empty"));
    }
    let side = model_config.generator.input_side;
    if let Some(bad) = images.iter().find(|i| i.height() != side || i.width() != side) {
        return Err(Error::contract(format!(
            "training image is {}x{} but the model expects {side}x{side}",
            bad.height(),
            bad.width()
        )));
    }
    let streams = SeedStreams::new(cfg.seed);
    let model = WgainModel::new(model_config, &mut streams.stream("init"))?;
    let mut trainer = Trainer::new(model, cfg.clone())?;
    let mut shuffle_rng = streams.stream("shuffle");
    let mut mask_rng = streams.stream("masks");
    let mut noise_rng = streams.stream("noise");

    let mut log_file = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(std::fs::OpenOptions::new().create(true).append(true).open(dir.join(METRICS_LOG))?)
        }
        None => None,
    };
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..images.len()).collect();
    let budget = cfg.max_steps.unwrap_or(u64::MAX);
    'epochs: for _ in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(cfg.batch) {
            if trainer.step() >= budget {
                break 'epochs;
            }
            let picked: Vec<ImageTensor> = chunk.iter().map(|&i| images[i].clone()).collect();
            let batch = sample_batch(&picked, &cfg.scenarios, cfg.sigma, &mut mask_rng, &mut noise_rng)?;
            let report = match trainer.train_step(&batch) {
                Ok(r) => r,
                Err(e) => {
                    if let (Some(dir), Error::Divergence(_)) = (out_dir, &e) {
                        // The failed step applied no update.
                        checkpoint::save(&dir.join(LAST_GOOD_CHECKPOINT), &trainer.model, trainer.step())?;
                    }
                    return Err(e);
                }
            };
            if report.step % cfg.log_every == 0 || report.step == 1 {
                append_record(&mut log_file, &report)?;
                log::info!(
                    "step {} critic {:.5} generator {:.5} recon {:.5} ({:.2}s)",
                    report.step,
                    report.critic_objective,
                    report.generator_objective,
                    report.recon_loss_value,
                    report.wall_time
                );
            }
            on_step(&report);
            log.push(report);
            if let Some(dir) = out_dir {
                if cfg.checkpoint_every > 0 && trainer.step() % cfg.checkpoint_every == 0 {
                    checkpoint::save(&dir.join(format!("step-{:08}", trainer.step())), &trainer.model, trainer.step())?;
                }
            }
        }
    }
    let final_checkpoint = match out_dir {
        Some(dir) => {
            let path = dir.join(FINAL_CHECKPOINT);
            checkpoint::save(&path, &trainer.model, trainer.step())?;
            Some(path)
        }
        None => None,
    };
    Ok(TrainOutcome { steps: trainer.step(), model: trainer.model, log, final_checkpoint })
}
