use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};

use wgain_client::{Client, InpaintOptions, MaskPayload};
use wgain_core::biharmonic::biharmonic_inpaint;
use wgain_core::checkpoint;
use wgain_core::config::RunConfig;
use wgain_core::corpus::{decode_image, load_all, load_corpus, make_synthetic_corpus, read_packed, write_packed};
use wgain_core::eval::{run_scenarios, save_grids, write_table};
use wgain_core::mask::EvalScenario;
use wgain_core::model::{inpaint_seeded, mask_image};
use wgain_core::rng::SeedStreams;
use wgain_core::trainer::train;
use wgain_core::{ImageTensor, MaskMatrix};
use wgain_service::{AppState, ServiceOptions};

#[derive(Debug, Parser)]
#[command(name = "wgain", version, about = "Image inpainting with a Wasserstein adversarial imputation network")]
struct Cli {
    /// Flat TOML config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random stream (masks, noise, shuffling, init).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Image directory; falls back to WGAIN_DATA_DIR.
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    /// Parent directory for run outputs.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Preprocess an image folder into a packed train/eval cache.
    Prepare,
    /// Train a model and write checkpoints.
    Train(TrainArgs),
    /// Evaluate a checkpoint against the biharmonic baseline.
    Eval(EvalArgs),
    /// Inpaint one image with a checkpoint or a running service.
    Inpaint(InpaintArgs),
    /// Inpaint one image with the biharmonic baseline.
    Baseline(BaselineArgs),
    /// Serve a checkpoint over HTTP.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Packed cache written by `prepare`.
    #[arg(long, conflicts_with = "synthetic")]
    packed: Option<PathBuf>,
    /// Use N generated images instead of a dataset.
    #[arg(long)]
    synthetic: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Preset {
    /// Widths as published.
    Full,
    /// Reduced widths for CPU runs.
    Desk,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[arg(long)]
    side: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// `all` or a comma-separated list of scenario labels.
    #[arg(long, default_value = "all")]
    scenarios: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ScenarioFlag {
    CenterSquare,
    MultiSquare,
    Noise,
}

#[derive(Debug, Args)]
struct MaskArgs {
    /// Input image (PNG or JPEG).
    #[arg(long)]
    image: PathBuf,
    /// Mask PNG, 0 = missing.
    #[arg(long, conflicts_with = "scenario")]
    mask: Option<PathBuf>,
    /// Generate the mask from an evaluation scenario instead.
    #[arg(long, value_enum, required_unless_present = "mask")]
    scenario: Option<ScenarioFlag>,
    /// Square side for the square scenarios.
    #[arg(long)]
    side: Option<usize>,
    /// Number of squares for multi-square.
    #[arg(long, default_value_t = 5)]
    count: usize,
    /// Missing probability for noise.
    #[arg(long, default_value_t = 0.5)]
    p: f64,
    /// Output PNG.
    #[arg(long)]
    output: PathBuf,
}

#[derive(Debug, Args)]
struct InpaintArgs {
    #[command(flatten)]
    mask: MaskArgs,
    #[arg(long, conflicts_with = "server", required_unless_present = "server")]
    checkpoint: Option<PathBuf>,
    /// Base URL of a running service.
    #[arg(long)]
    server: Option<String>,
    /// Write original, damaged and result side by side (service only).
    #[arg(long, requires = "server")]
    grid: bool,
}

#[derive(Debug, Args)]
struct BaselineArgs {
    #[command(flatten)]
    mask: MaskArgs,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "127.0.0.1")]
    bind: std::net::IpAddr,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value_t = wgain_service::DEFAULT_MAX_PAYLOAD_BYTES)]
    max_payload_bytes: usize,
    #[arg(long)]
    allow_resize: bool,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] wgain_core::Error),
    #[error(transparent)]
    Client(#[from] wgain_client::ClientError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) if e.is_validation() => 1,
            CliError::Core(wgain_core::Error::Ingestion { .. }) => 1,
            CliError::Client(e) if e.is_client_error() => 1,
            _ => 2,
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn resolve_config(cli: &Cli) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(d) = &cli.data_dir {
        cfg.data_dir = Some(d.clone());
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    if let Command::Train(t) = &cli.command {
        if let Some(p) = t.preset {
            let side = t.side.unwrap_or(cfg.input_side);
            let m = match p {
                Preset::Full => wgain_core::model::ModelConfig::default(),
                Preset::Desk => wgain_core::model::ModelConfig::desk_scale(side),
            };
            cfg.encoder_widths = m.generator.encoder_widths;
            cfg.decoder_widths = m.generator.decoder_widths;
            cfg.critic_widths = m.critic.widths;
        }
        if let Some(v) = t.side {
            cfg.input_side = v;
        }
        if let Some(v) = t.epochs {
            cfg.epochs = v;
        }
        if t.max_steps.is_some() {
            cfg.max_steps = t.max_steps;
        }
        if let Some(v) = t.batch {
            cfg.batch = v;
        }
        if let Some(v) = t.alpha {
            cfg.alpha = v;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    argv: Vec<String>,
    version: &'a str,
    started_unix: u64,
    seed: u64,
    config: &'a RunConfig,
    inputs: serde_json::Value,
    outputs: Vec<PathBuf>,
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn fingerprint(cfg: &RunConfig, extra: &str) -> String {
    let digest = Sha256::digest(format!("{}\n{extra}", cfg.to_toml()).as_bytes());
    digest.iter().take(4).map(|b| format!("{b:02x}")).collect()
}

/// `<out>/<command>-<unix time>-<config fingerprint>`.
fn run_dir(cfg: &RunConfig, command: &str, extra: &str) -> CliResult<PathBuf> {
    let dir = cfg.out_dir.join(format!("{command}-{}-{}", unix_now(), fingerprint(cfg, extra)));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write_manifest(path: &Path, command: &str, cfg: &RunConfig, inputs: serde_json::Value, outputs: Vec<PathBuf>) -> CliResult<()> {
    let m = RunManifest {
        command,
        argv: std::env::args().collect(),
        version: env!("CARGO_PKG_VERSION"),
        started_unix: unix_now(),
        seed: cfg.seed,
        config: cfg,
        inputs,
        outputs,
    };
    std::fs::write(path, serde_json::to_vec_pretty(&m).expect("manifest serializes"))?;
    Ok(())
}

/// Loads the requested split from a packed cache, a synthetic corpus or
/// the configured image directory.
fn load_images(cfg: &RunConfig, data: &DataArgs, split: &str) -> CliResult<(Vec<ImageTensor>, serde_json::Value)> {
    if let Some(n) = data.synthetic {
        if n == 0 {
            return Err(CliError::Usage("--synthetic needs at least one image".into()));
        }
        let imgs = make_synthetic_corpus(n, cfg.input_side, &mut SeedStreams::new(cfg.seed).stream("synthetic-corpus"))?;
        return Ok((imgs, serde_json::json!({ "synthetic": n })));
    }
    if let Some(path) = &data.packed {
        let mut splits = read_packed(path)?;
        let imgs = splits
            .remove(split)
            .ok_or_else(|| CliError::Usage(format!("{} has no `{split}` split", path.display())))?;
        return Ok((imgs, serde_json::json!({ "packed": path, "split": split })));
    }
    let corpus = load_corpus(&cfg.corpus_config()?)?;
    let items = if split == "train" { &corpus.train } else { &corpus.eval };
    let dir = cfg.corpus_config()?.source_dir;
    Ok((load_all(items, cfg.input_side)?, serde_json::json!({ "data_dir": dir, "split": split, "count": items.len() })))
}

fn cmd_prepare(cfg: &RunConfig) -> CliResult<()> {
    let corpus_cfg = cfg.corpus_config()?;
    let split = load_corpus(&corpus_cfg)?;
    let train = load_all(&split.train, cfg.input_side)?;
    let eval = load_all(&split.eval, cfg.input_side)?;
    let dir = run_dir(cfg, "prepare", "")?;
    let packed = dir.join("corpus.safetensors");
    write_packed(&packed, &[("train", &train), ("eval", &eval)])?;
    write_manifest(
        &dir.join("manifest.json"),
        "prepare",
        cfg,
        serde_json::json!({ "data_dir": corpus_cfg.source_dir, "train": train.len(), "eval": eval.len() }),
        vec![packed.clone()],
    )?;
    println!("{}", packed.display());
    Ok(())
}

fn cmd_train(cfg: &RunConfig, args: &TrainArgs) -> CliResult<()> {
    let (images, inputs) = load_images(cfg, &args.data, "train")?;
    let dir = run_dir(cfg, "train", &inputs.to_string())?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml())?;
    let outcome = train(&images, &cfg.model_config(), &cfg.train_config(), Some(&dir), |_| {})?;
    let final_ck = outcome.final_checkpoint.expect("output directory was given");
    write_manifest(&dir.join("manifest.json"), "train", cfg, inputs, vec![final_ck.clone(), dir.join(wgain_core::trainer::METRICS_LOG)])?;
    if let Some(last) = outcome.log.last() {
        eprintln!("trained {} steps; last recon loss {:.5}", outcome.steps, last.recon_loss_value);
    }
    println!("{}", final_ck.display());
    Ok(())
}

fn parse_scenarios(spec: &str, side: usize) -> CliResult<Vec<EvalScenario>> {
    let all = EvalScenario::standard_set(side);
    if spec == "all" {
        return Ok(all);
    }
    spec.split(',')
        .map(|label| {
            all.iter()
                .find(|s| s.label() == label.trim())
                .copied()
                .ok_or_else(|| {
                    let known: Vec<String> = all.iter().map(|s| s.label()).collect();
                    CliError::Usage(format!("unknown scenario `{label}`; known: {}", known.join(", ")))
                })
        })
        .collect()
}

fn cmd_eval(cfg: &RunConfig, args: &EvalArgs) -> CliResult<()> {
    let ck = checkpoint::load(&args.checkpoint, None)?;
    let mut cfg = cfg.clone();
    cfg.input_side = ck.manifest.config.generator.input_side;
    let (images, inputs) = load_images(&cfg, &args.data, "eval")?;
    let scenarios = parse_scenarios(&args.scenarios, cfg.input_side)?;
    let run = run_scenarios(&ck.model, &images, &scenarios, &cfg.eval_options())?;
    let dir = run_dir(&cfg, "eval", &run.report.fingerprint.digest)?;
    write_table(&run.report, &dir)?;
    let grids = save_grids(&run, &dir.join("grids"))?;
    let mut outputs = vec![dir.join("table.csv"), dir.join("table.txt"), dir.join("references.csv"), dir.join("report.json")];
    outputs.extend(grids);
    write_manifest(
        &dir.join("manifest.json"),
        "eval",
        &cfg,
        serde_json::json!({ "checkpoint": args.checkpoint, "checkpoint_hash": ck.manifest.content_hash, "data": inputs }),
        outputs,
    )?;
    eprint!("{}", wgain_core::eval::render_text(&run.report));
    println!("{}", dir.display());
    Ok(())
}

fn read_image(path: &Path) -> CliResult<ImageTensor> {
    let bytes = std::fs::read(path).map_err(|e| wgain_core::Error::Ingestion { path: path.to_path_buf(), reason: e.to_string() })?;
    decode_image(&bytes).map_err(|e| wgain_core::Error::Ingestion { path: path.to_path_buf(), reason: e.to_string() }.into())
}

fn build_mask(args: &MaskArgs, image: &ImageTensor, seed: u64) -> CliResult<MaskMatrix> {
    if let Some(path) = &args.mask {
        let m = MaskMatrix::load_png(path)?;
        image.check_mask(&m)?;
        return Ok(m);
    }
    let (h, w) = (image.height(), image.width());
    let scenario = match args.scenario.expect("clap enforces mask or scenario") {
        ScenarioFlag::CenterSquare => EvalScenario::CenterSquare { side: args.side.unwrap_or(h.min(w) / 2) },
        ScenarioFlag::MultiSquare => EvalScenario::MultiSquare {
            count: args.count,
            side: args.side.unwrap_or(((h.min(w) as f64) * 31.0 / 128.0).round() as usize),
        },
        ScenarioFlag::Noise => EvalScenario::Noise { p: args.p },
    };
    Ok(scenario.sample(h, w, &mut SeedStreams::new(seed).stream("cli-mask"))?)
}

fn write_single_output(cfg: &RunConfig, command: &str, args: &MaskArgs, mask: &MaskMatrix, inputs: serde_json::Value) -> CliResult<()> {
    let mask_path = args.output.with_extension("mask.png");
    if args.mask.is_none() {
        mask.save_png(&mask_path)?;
    }
    let manifest = args.output.with_extension("manifest.json");
    write_manifest(&manifest, command, cfg, inputs, vec![args.output.clone()])?;
    println!("{}", args.output.display());
    Ok(())
}

fn cmd_inpaint(cfg: &RunConfig, args: &InpaintArgs) -> CliResult<()> {
    let image = read_image(&args.mask.image)?;
    let mask = build_mask(&args.mask, &image, cfg.seed)?;
    if let Some(url) = &args.server {
        let rt = tokio::runtime::Builder::new_current_thread().enable_all().build()?;
        let client = Client::new(url);
        let opts = InpaintOptions { seed: Some(cfg.seed), grid: args.grid };
        let png_in = std::fs::read(&args.mask.image)?;
        let resp = rt.block_on(client.inpaint(png_in, MaskPayload::Png(mask.encode_png()?), &opts))?;
        std::fs::write(&args.mask.output, &resp.png)?;
        return write_single_output(cfg, "inpaint", &args.mask, &mask, serde_json::json!({ "server": url, "inference_ms": resp.inference_ms }));
    }
    let ck_dir = args.checkpoint.as_ref().expect("clap enforces checkpoint or server");
    let ck = checkpoint::load(ck_dir, None)?;
    let side = ck.manifest.config.generator.input_side;
    if image.height() != side || image.width() != side {
        return Err(CliError::Usage(format!(
            "image is {}x{} but the checkpoint expects {side}x{side}",
            image.height(),
            image.width()
        )));
    }
    let out = inpaint_seeded(&ck.model.generator, &image, &mask, cfg.sigma, cfg.seed)?;
    out.save_png(&args.mask.output)?;
    write_single_output(
        cfg,
        "inpaint",
        &args.mask,
        &mask,
        serde_json::json!({ "image": args.mask.image, "checkpoint": ck_dir, "checkpoint_hash": ck.manifest.content_hash }),
    )
}

fn cmd_baseline(cfg: &RunConfig, args: &BaselineArgs) -> CliResult<()> {
    let image = read_image(&args.mask.image)?;
    let mask = build_mask(&args.mask, &image, cfg.seed)?;
    biharmonic_inpaint(&mask_image(&image, &mask)?, &mask)?.save_png(&args.mask.output)?;
    write_single_output(cfg, "baseline", &args.mask, &mask, serde_json::json!({ "image": args.mask.image }))
}

fn cmd_serve(cfg: &RunConfig, args: &ServeArgs) -> CliResult<()> {
    let options = ServiceOptions { max_payload_bytes: args.max_payload_bytes, allow_resize: args.allow_resize, sigma: cfg.sigma };
    let state = AppState::from_checkpoint(&args.checkpoint, options)?;
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(wgain_service::serve(state, SocketAddr::new(args.bind, args.port)))?;
    Ok(())
}

fn run(cli: &Cli) -> CliResult<()> {
    let cfg = resolve_config(cli)?;
    match &cli.command {
        Command::Prepare => cmd_prepare(&cfg),
        Command::Train(a) => cmd_train(&cfg, a),
        Command::Eval(a) => cmd_eval(&cfg, a),
        Command::Inpaint(a) => cmd_inpaint(&cfg, a),
        Command::Baseline(a) => cmd_baseline(&cfg, a),
        Command::Serve(a) => cmd_serve(&cfg, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
