//! Command dispatch for the `mgan` binary.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use mgan_core::config::{Preset, RunConfig, FORMAT_TAG};
use mgan_core::evaluation::evaluate_models;
use mgan_core::inference::{load_prepared, predict_volume};
use mgan_core::phantom::{default_cohort, generate_cohort, Manifest, PhantomSpec};
use mgan_core::training::{resume, train, TrainState};
use mgan_core::uncertainty::{aleatoric_map, epistemic_map};
use mgan_core::volume_io::write_volume;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

/// Snapshot written into every run directory.
pub const SNAPSHOT_FILE: &str = "run_config.json";

#[derive(Parser, Debug)]
#[command(name = "mgan", version, about = "Longitudinal 3D volume translation with wavelet-augmented GANs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic two-time-point phantom cohort and its manifest.
    Phantom(PhantomArgs),
    /// Train both translation directions on a manifest.
    Train(TrainArgs),
    /// Translate one volume with a trained checkpoint.
    Predict(PredictArgs),
    /// Epistemic and/or aleatoric uncertainty maps for one volume.
    Uncertainty(UncertaintyArgs),
    /// Metrics, CSV tables and montages for every pair of a manifest.
    Evaluate(EvaluateArgs),
}

#[derive(Args, Debug)]
struct PhantomArgs {
    /// Number of subjects.
    #[arg(long)]
    n: usize,
    /// Edge length of the cubic volumes.
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    noise_sigma: Option<f64>,
    /// Keep the tissue contrast ordering between time points.
    #[arg(long)]
    no_contrast_flip: bool,
}

/// Options shared by every command that builds a `RunConfig`.
#[derive(Args, Debug, Default)]
struct ConfigArgs {
    /// JSON or TOML run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Start from the reduced 32³ CPU configuration instead of the full one.
    #[arg(long)]
    desk: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PresetArg {
    Backbone,
    SftNcg,
    StCg,
    Mgan,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Backbone => Preset::Backbone,
            PresetArg::SftNcg => Preset::SftNcg,
            PresetArg::StCg => Preset::StCg,
            PresetArg::Mgan => Preset::Mgan,
        }
    }
}

/// Cross-validation split of the manifest's subjects (round-robin by first
/// appearance).
#[derive(Args, Debug)]
struct FoldArgs {
    /// Held-out fold index; training drops it and evaluation keeps only it.
    #[arg(long)]
    fold: Option<usize>,
    #[arg(long, default_value_t = 5, requires = "fold")]
    folds: usize,
}

impl FoldArgs {
    fn apply(&self, manifest: Manifest, keep_fold: bool) -> anyhow::Result<Manifest> {
        Ok(match self.fold {
            Some(f) => manifest.fold_split(self.folds, f, keep_fold)?,
            None => manifest,
        })
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    split: FoldArgs,
    /// Run directory for checkpoints, log and config snapshot.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long, value_enum)]
    preset: Option<PresetArg>,
    #[arg(long)]
    pretrain_epochs: Option<usize>,
    #[arg(long)]
    adversarial_epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    patch_size: Option<usize>,
    #[arg(long)]
    stride: Option<usize>,
    /// Continue from this checkpoint; its stored config is used.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, Default, ValueEnum, PartialEq, Eq)]
enum Direction {
    /// Earlier to later time point.
    #[default]
    Ab,
    /// Later to earlier time point.
    Ba,
}

#[derive(Args, Debug)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    /// Output volume path (`.nii` for NIfTI).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Direction::Ab)]
    direction: Direction,
    #[arg(long)]
    patch_size: Option<usize>,
    #[arg(long)]
    stride: Option<usize>,
}

#[derive(Clone, Copy, Debug, ValueEnum, PartialEq, Eq)]
enum KindArg {
    Epistemic,
    Aleatoric,
    Both,
}

#[derive(Args, Debug)]
struct UncertaintyArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    /// Prediction path; maps are written beside it with kind suffixes.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Direction::Ab)]
    direction: Direction,
    #[arg(long, value_enum, default_value_t = KindArg::Both)]
    kind: KindArg,
    /// Stochastic passes per map.
    #[arg(long)]
    samples: Option<usize>,
    /// Dropout keep rate of the MC passes.
    #[arg(long)]
    keep: Option<f64>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    split: FoldArgs,
    #[arg(long)]
    out: PathBuf,
    /// Compute metrics over the whole volume instead of the foreground.
    #[arg(long)]
    full_volume: bool,
    /// MC passes for the uncertainty montage panel (0 skips it).
    #[arg(long)]
    mc_samples: Option<usize>,
    #[arg(long)]
    data_range: Option<f64>,
}

#[derive(Serialize)]
struct Snapshot<'a, C: Serialize> {
    format: &'a str,
    command: &'a str,
    config: &'a C,
}

fn write_snapshot<C: Serialize>(dir: &Path, command: &str, config: &C) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let snap = Snapshot {
        format: FORMAT_TAG,
        command,
        config,
    };
    let path = dir.join(SNAPSHOT_FILE);
    fs::write(&path, serde_json::to_string_pretty(&snap)?).with_context(|| format!("writing {}", path.display()))
}

/// Reads a JSON or TOML (by extension) configuration file as a JSON tree; a
/// run snapshot yields its recorded config.
fn read_config_value(path: &Path) -> anyhow::Result<serde_json::Value> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let value = match path.extension().and_then(|e| e.to_str()) {
        Some("toml") => toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?,
        _ => serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?,
    };
    match value {
        serde_json::Value::Object(mut m) if m.get("format").and_then(|f| f.as_str()) == Some(FORMAT_TAG) => {
            m.remove("config").context("snapshot without a config field")
        }
        v => Ok(v),
    }
}

/// Recursively overwrites `base` with the fields present in `over`.
fn merge(base: &mut serde_json::Value, over: serde_json::Value) {
    match (base, over) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// `base` with the fields of a JSON or TOML file layered on top.
pub fn layer_config_file(base: &RunConfig, path: &Path) -> anyhow::Result<RunConfig> {
    let mut value = serde_json::to_value(base)?;
    merge(&mut value, read_config_value(path)?);
    serde_json::from_value(value).with_context(|| format!("interpreting {}", path.display()))
}

/// Defaults (full or desk scale), then the file, then explicit flags.
fn base_config(args: &ConfigArgs) -> anyhow::Result<RunConfig> {
    let defaults = if args.desk { RunConfig::desk() } else { RunConfig::default() };
    let mut cfg = match &args.config {
        Some(p) => layer_config_file(&defaults, p)?,
        None => defaults,
    };
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn generator_for(state: &TrainState, d: Direction) -> &mgan_core::networks::Generator {
    match d {
        Direction::Ab => &state.g_a,
        Direction::Ba => &state.g_b,
    }
}

fn parent_dir(p: &Path) -> PathBuf {
    match p.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn cmd_phantom(a: PhantomArgs) -> anyhow::Result<()> {
    let mut spec = PhantomSpec {
        size: [a.size; 3],
        seed: a.seed,
        contrast_flip: !a.no_contrast_flip,
        ..PhantomSpec::default()
    };
    if let Some(s) = a.noise_sigma {
        spec.noise_sigma = s;
    }
    spec.validate()?;
    let manifest = generate_cohort(&default_cohort(a.n, &spec), &a.out)?;
    write_snapshot(&a.out, "phantom", &spec)?;
    println!("wrote {} volumes and manifest to {}", manifest.rows.len(), a.out.display());
    Ok(())
}

fn train_config(a: &TrainArgs) -> anyhow::Result<RunConfig> {
    let mut cfg = base_config(&a.cfg)?;
    if let Some(p) = a.preset {
        cfg = cfg.with_preset(p.into());
    }
    let t = &mut cfg.train;
    if let Some(v) = a.pretrain_epochs {
        t.pretrain_epochs = v;
    }
    if let Some(v) = a.adversarial_epochs {
        t.adversarial_epochs = v;
    }
    if let Some(v) = a.lr {
        t.lr = v;
    }
    if let Some(v) = a.patch_size {
        t.patch_size = v;
        cfg.inference.patch_size = v;
    }
    if let Some(v) = a.stride {
        t.stride = v;
    }
    check_config(&cfg)?;
    Ok(cfg)
}

fn cmd_train(a: TrainArgs) -> anyhow::Result<()> {
    let manifest = a.split.apply(Manifest::read(&a.manifest)?, false)?;
    let outcome = match &a.resume {
        Some(ckpt) => {
            let state = TrainState::load(ckpt)?;
            write_snapshot(&a.out, "train", &state.config)?;
            resume(ckpt, &manifest, &a.out)?
        }
        None => {
            let cfg = train_config(&a)?;
            write_snapshot(&a.out, "train", &cfg)?;
            train(&manifest, &cfg, &a.out)?
        }
    };
    println!(
        "trained {} epochs ({} steps); final checkpoint {}",
        outcome.state.epoch,
        outcome.state.step,
        outcome.final_checkpoint.display()
    );
    Ok(())
}

fn cmd_predict(a: PredictArgs) -> anyhow::Result<()> {
    let state = TrainState::load(&a.checkpoint)?;
    let mut cfg = state.config.clone();
    if let Some(p) = a.patch_size {
        cfg.inference.patch_size = p;
    }
    if let Some(s) = a.stride {
        cfg.inference.stride = s;
    }
    write_snapshot(&parent_dir(&a.out), "predict", &cfg)?;
    let x = load_prepared(&a.input)?;
    let g = generator_for(&state, a.direction);
    let y = predict_volume(g, &x, cfg.inference.patch_size, cfg.inference.stride, None)?;
    write_volume(&y, &a.out)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn cmd_uncertainty(a: UncertaintyArgs) -> anyhow::Result<()> {
    let state = TrainState::load(&a.checkpoint)?;
    let mut cfg = state.config.clone();
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.samples {
        cfg.inference.mc_samples = n;
        cfg.inference.tta_samples = n;
    }
    if let Some(k) = a.keep {
        cfg.generator.dropout_keep = k;
    }
    if let Some(s) = a.noise_sigma {
        cfg.inference.tta_noise_sigma = s;
    }
    write_snapshot(&parent_dir(&a.out), "uncertainty", &cfg)?;
    let x = load_prepared(&a.input)?;
    let g = generator_for(&state, a.direction);
    let inf = &cfg.inference;
    let (p, s) = (inf.patch_size, inf.stride);
    let y = predict_volume(g, &x, p, s, None)?;
    write_volume(&y, &a.out)?;
    if matches!(a.kind, KindArg::Epistemic | KindArg::Both) {
        let m = epistemic_map(g, &x, inf.mc_samples, cfg.generator.dropout_keep, cfg.seed, p, s)?;
        println!("wrote {}", m.write_beside(&a.out)?.display());
    }
    if matches!(a.kind, KindArg::Aleatoric | KindArg::Both) {
        let m = aleatoric_map(g, &x, inf.tta_samples, inf.tta_noise_sigma, cfg.seed, p, s)?;
        println!("wrote {}", m.write_beside(&a.out)?.display());
    }
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> anyhow::Result<()> {
    let manifest = a.split.apply(Manifest::read(&a.manifest)?, true)?;
    let mut state = TrainState::load(&a.checkpoint)?;
    let cfg = &mut state.config;
    if a.full_volume {
        cfg.evaluation.masked = false;
    }
    if let Some(n) = a.mc_samples {
        cfg.inference.mc_samples = n;
    }
    if let Some(r) = a.data_range {
        cfg.evaluation.data_range = r;
    }
    check_config(cfg)?;
    write_snapshot(&a.out, "evaluate", &state.config)?;
    let report = evaluate_models(&manifest, &state, &a.out)?;
    for (dir, s) in &report.summary {
        println!(
            "{dir}: psnr {:.3} ± {:.3} dB, ssim {:.4} ± {:.4} (n = {})",
            s.psnr_db.mean, s.psnr_db.std, s.ssim.mean, s.ssim.std, s.n
        );
    }
    Ok(())
}

/// Parses `argv` (program name first), runs the command and returns the exit
/// code: 0 success, 1 usage error, 2 runtime error.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Phantom(a) => cmd_phantom(a),
        Command::Train(a) => cmd_train(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Uncertainty(a) => cmd_uncertainty(a),
        Command::Evaluate(a) => cmd_evaluate(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_RUNTIME
        }
    }
}

/// Rejects configurations that cannot run before any work starts.
pub fn check_config(cfg: &RunConfig) -> anyhow::Result<()> {
    if cfg.device != "cpu" {
        bail!("device {:?} is not available; only \"cpu\" is supported", cfg.device);
    }
    Ok(cfg.validate()?)
}
