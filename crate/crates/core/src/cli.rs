//! Command-line interface: synthetic data generation, mask computation,
//! training, video generation, and evaluation.
//!
//! Exit codes: 0 on success, 1 for usage/configuration errors, 2 for runtime
//! failures (I/O, malformed data, divergence).

use crate::data_pipeline::{
    load_dataset, load_png_gray, load_png_rgb, read_manifest, save_png_gray, synthesize_pair,
    synthetic_seconds, write_sample, Manifest, ManifestPatient, Split, SyntheticSceneParams,
};
use crate::error::{Error, Result};
use crate::inference::generate_video;
use crate::knowledge_mask::{compute_mask, mask_coverage, DEFAULT_THRESHOLD};
use crate::metrics::evaluate;
use crate::trainer::{TrainConfig, Trainer};
use clap::{Args, Parser, Subcommand};
use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "fundus2video",
    version,
    about = "FFA video generation from a single color fundus image"
)]
struct Cli {
    /// Log verbosity: error, warn, info, debug, trace.
    #[arg(long, global = true, default_value = "warn")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic CF/FFA dataset with a manifest.
    SynthData(SynthArgs),
    /// Compute the change-based knowledge mask of two FFA frames.
    Mask(MaskArgs),
    /// Train the generator and discriminators.
    Train(TrainArgs),
    /// Roll out an FFA video from a CF image using a trained checkpoint.
    Generate(GenerateArgs),
    /// Score generated videos against ground truth over a dataset split.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Dataset root directory (manifest.json is created or extended).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    patients: usize,
    #[arg(long, default_value_t = 64)]
    resolution: usize,
    /// FFA frames per patient.
    #[arg(long, default_value_t = 12)]
    frames: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Split the new patients are assigned to.
    #[arg(long, default_value = "train")]
    split: String,
}

#[derive(Args)]
struct MaskArgs {
    /// First (early-phase) FFA frame, grayscale PNG.
    #[arg(long)]
    first: PathBuf,
    /// Last (late-phase) FFA frame, grayscale PNG.
    #[arg(long)]
    last: PathBuf,
    /// Output mask PNG.
    #[arg(long)]
    out: PathBuf,
    /// Intensity-change threshold on the 0-255 scale.
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset root (as produced by synth-data or laid out the same way).
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoints and the loss log.
    #[arg(long)]
    out: PathBuf,
    /// JSON or TOML file with training settings; command-line flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Resume from an existing checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<u64>,
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long)]
    image_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    teacher_forcing_prob: Option<f64>,
    #[arg(long)]
    frames_per_phase: Option<usize>,
    /// Disable the knowledge mask: unmasked GAN and contrastive losses,
    /// no attention term.
    #[arg(long)]
    no_knowledge_mask: bool,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Color fundus image (PNG).
    #[arg(long)]
    cf: PathBuf,
    /// Output directory for the PNG sequence and video.json.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 12)]
    frames: usize,
    /// Skip the triple-frame temporal smoothing.
    #[arg(long)]
    no_smooth: bool,
    /// Write into a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Optional directory for evaluation.json / evaluation.csv.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    frames_per_phase: usize,
    #[arg(long)]
    no_smooth: bool,
    /// Seed for the per-sample frame selection.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Parse and run; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    init_logging(&cli.log_level);
    let result = match cli.command {
        Command::SynthData(a) => cmd_synth(a),
        Command::Mask(a) => cmd_mask(a),
        Command::Train(a) => cmd_train(a),
        Command::Generate(a) => cmd_generate(a),
        Command::Evaluate(a) => cmd_evaluate(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn init_logging(level: &str) {
    let filter = match level {
        "error" => log::LevelFilter::Error,
        "warn" => log::LevelFilter::Warn,
        "info" => log::LevelFilter::Info,
        "debug" => log::LevelFilter::Debug,
        "trace" => log::LevelFilter::Trace,
        _ => log::LevelFilter::Warn,
    };
    let _ = env_logger::Builder::new().filter_level(filter).try_init();
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    let s = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: PathBuf::from("<stdout>"),
        source: e,
    })?;
    println!("{s}");
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let split: Split = a.split.parse()?;
    if a.patients == 0 {
        return Err(Error::Config("--patients must be >= 1".into()));
    }
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let mut manifest = if a.out.join("manifest.json").exists() {
        read_manifest(&a.out)?
    } else {
        Manifest {
            patients: BTreeMap::new(),
        }
    };
    for k in 0..a.patients {
        let params = SyntheticSceneParams::random(a.seed + k as u64, a.resolution, a.frames);
        let mut sample = synthesize_pair(&params)?;
        sample.patient_id = format!("{}{:04}", split_prefix(split), a.seed + k as u64);
        let seconds: Vec<f64> = (0..a.frames)
            .map(|i| synthetic_seconds(i, a.frames))
            .collect();
        write_sample(&a.out, &sample, &seconds)?;
        manifest.patients.insert(
            sample.patient_id.clone(),
            ManifestPatient {
                split,
                timestamps: seconds,
            },
        );
    }
    let mpath = a.out.join("manifest.json");
    let body = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Json {
        path: mpath.clone(),
        source: e,
    })?;
    std::fs::write(&mpath, body).map_err(|e| Error::io(&mpath, e))?;
    println!(
        "wrote {} {} patients to {}",
        a.patients,
        a.split,
        a.out.display()
    );
    Ok(())
}

fn split_prefix(split: Split) -> &'static str {
    match split {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
    }
}

fn cmd_mask(a: MaskArgs) -> Result<()> {
    let first = load_png_gray(&a.first)?;
    let last = load_png_gray(&a.last)?;
    let mask = compute_mask(&first, &last, a.threshold)?;
    save_png_gray(&a.out, &mask.values)?;
    print_json(&serde_json::json!({
        "out": a.out.display().to_string(),
        "threshold": a.threshold,
        "coverage": mask_coverage(&mask),
    }))
}

fn load_train_config(path: &PathBuf) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).map_err(|_| {
        Error::Config(format!("cannot read config file {}", path.display()))
    })?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("toml") => toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display()))),
        _ => serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display()))),
    }
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    // precedence: defaults < config file < command line
    let mut cfg = match &a.config {
        Some(p) => load_train_config(p)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if a.max_steps.is_some() {
        cfg.max_steps = a.max_steps;
    }
    if let Some(v) = a.image_size {
        cfg.image_size = v;
    }
    if let Some(v) = a.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = a.teacher_forcing_prob {
        cfg.teacher_forcing_prob = v;
    }
    if let Some(v) = a.frames_per_phase {
        cfg.frames_per_phase = v;
    }
    if a.no_knowledge_mask {
        cfg.use_knowledge_mask = false;
    }
    cfg.validate()?;
    print_json(&cfg)?;

    let dataset = load_dataset(&a.data, Split::Train, cfg.image_size)?;
    if dataset.is_empty() {
        return Err(Error::Config(format!(
            "no training samples under {}",
            a.data.display()
        )));
    }
    let mut trainer = match &a.resume {
        Some(ck) => Trainer::resume(cfg, ck)?,
        None => Trainer::new(cfg)?,
    };
    let history = trainer.fit(&dataset, &a.out)?;
    if let (Some(first), Some(last)) = (history.first(), history.last()) {
        println!(
            "trained {} steps: total loss {:.4} -> {:.4}",
            history.len(),
            first.total,
            last.total
        );
    }
    Ok(())
}

fn cmd_generate(a: GenerateArgs) -> Result<()> {
    let cf = load_png_rgb(&a.cf)?;
    let manifest = generate_video(
        &a.checkpoint,
        &cf,
        &a.out,
        a.frames,
        !a.no_smooth,
        a.force,
    )?;
    print_json(&manifest)
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let split: Split = a.split.parse()?;
    let ck = crate::checkpoint::load_checkpoint(&a.checkpoint)?;
    let dataset = load_dataset(&a.data, split, ck.header.image_size)?;
    if dataset.is_empty() {
        return Err(Error::Config(format!(
            "no {} samples under {}",
            a.split,
            a.data.display()
        )));
    }
    let report = evaluate(
        &a.checkpoint,
        &dataset,
        a.frames_per_phase,
        !a.no_smooth,
        a.seed,
        a.out.as_deref(),
    )?;
    print_json(&report)
}
