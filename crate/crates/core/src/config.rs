//! Flat key-value run configuration (TOML), resolved as
//! defaults < config file < command-line overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::CorpusConfig;
use crate::error::{Error, Result};
use crate::eval::EvalOptions;
use crate::mask::TrainScenarios;
use crate::metrics::SsimParams;
use crate::model::{CriticConfig, GeneratorConfig, ModelConfig};
use crate::trainer::{ReconLoss, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data_dir: Option<PathBuf>,
    pub out_dir: PathBuf,

    pub input_side: usize,
    pub encoder_widths: Vec<usize>,
    pub decoder_widths: Vec<usize>,
    pub critic_widths: Vec<usize>,

    pub train_fraction: f64,
    pub eval_fraction: f64,

    pub alpha: f64,
    pub batch: usize,
    pub lambda_f: f64,
    pub lambda_g: f64,
    pub lambda_mae: f64,
    pub epochs: usize,
    pub max_steps: Option<u64>,
    pub sigma: f64,
    pub clip_norm: f64,
    pub recon_loss: ReconLoss,
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,

    pub ssim_window: usize,
    pub ssim_k1: f64,
    pub ssim_k2: f64,
    pub eval_noise_samples: usize,
    pub grid_examples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        let train = TrainConfig::default();
        let corpus = CorpusConfig::default();
        let ssim = SsimParams::default();
        let eval = EvalOptions::default();
        Self {
            seed: 0,
            data_dir: None,
            out_dir: PathBuf::from("runs"),
            input_side: model.generator.input_side,
            encoder_widths: model.generator.encoder_widths,
            decoder_widths: model.generator.decoder_widths,
            critic_widths: model.critic.widths,
            train_fraction: corpus.train_fraction,
            eval_fraction: corpus.eval_fraction,
            alpha: train.alpha,
            batch: train.batch,
            lambda_f: train.lambda_f,
            lambda_g: train.lambda_g,
            lambda_mae: train.lambda_mae,
            epochs: train.epochs,
            max_steps: train.max_steps,
            sigma: train.sigma,
            clip_norm: train.clip_norm,
            recon_loss: train.recon_loss,
            checkpoint_every: train.checkpoint_every,
            log_every: train.log_every,
            adam_beta1: train.adam_beta1,
            adam_beta2: train.adam_beta2,
            adam_epsilon: train.adam_epsilon,
            ssim_window: ssim.window,
            ssim_k1: ssim.k1,
            ssim_k2: ssim.k2,
            eval_noise_samples: eval.noise_samples,
            grid_examples: eval.grid_examples,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::validation(format!("config: {}", e.message())))
    }

    /// Defaults overlaid with the file at `path`, if any.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::validation(format!("cannot read config {}: {e}", p.display())))?;
                Self::from_toml(&text)
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            generator: GeneratorConfig {
                input_side: self.input_side,
                encoder_widths: self.encoder_widths.clone(),
                decoder_widths: self.decoder_widths.clone(),
                ..GeneratorConfig::default()
            },
            critic: CriticConfig {
                input_side: self.input_side,
                widths: self.critic_widths.clone(),
                clip_norm: self.clip_norm,
                ..CriticConfig::default()
            },
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            alpha: self.alpha,
            batch: self.batch,
            lambda_f: self.lambda_f,
            lambda_g: self.lambda_g,
            lambda_mae: self.lambda_mae,
            epochs: self.epochs,
            max_steps: self.max_steps,
            sigma: self.sigma,
            clip_norm: self.clip_norm,
            recon_loss: self.recon_loss,
            seed: self.seed,
            checkpoint_every: self.checkpoint_every,
            log_every: self.log_every,
            adam_beta1: self.adam_beta1,
            adam_beta2: self.adam_beta2,
            adam_epsilon: self.adam_epsilon,
            scenarios: TrainScenarios::default(),
        }
    }

    /// Corpus settings; `WGAIN_DATA_DIR` fills in a missing data directory.
    pub fn corpus_config(&self) -> Result<CorpusConfig> {
        let base = CorpusConfig {
            source_dir: self.data_dir.clone().unwrap_or_default(),
            target_side: self.input_side,
            train_fraction: self.train_fraction,
            eval_fraction: self.eval_fraction,
            shuffle_seed: self.seed,
        };
        let cfg = if self.data_dir.is_none() { base.with_env_override() } else { base };
        if cfg.source_dir.as_os_str().is_empty() {
            return Err(Error::validation("no data directory: pass --data-dir or set WGAIN_DATA_DIR"));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            seed: self.seed,
            sigma: self.sigma,
            ssim: SsimParams { window: self.ssim_window, k1: self.ssim_k1, k2: self.ssim_k2, ..SsimParams::default() },
            noise_samples: self.eval_noise_samples,
            grid_examples: self.grid_examples,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.train_config().validate()?;
        if self.eval_noise_samples == 0 {
            return Err(Error::validation("eval_noise_samples must be at least 1"));
        }
        if self.ssim_window < 2 {
            return Err(Error::validation("ssim_window must be at least 2"));
        }
        Ok(())
    }
}
