//! `msvq`: train, evaluate and analyze from the command line.

mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use msvq::analysis::{export_embeddings, replay_false_negatives};
use msvq::data::Split;
use msvq::evalkit::{extract_features, knn_evaluate, linear_probe, EvalReport};
use msvq::trainer::{checkpoint_dtype, checkpoint_name, load_checkpoint, save_checkpoint, MetricsWriter, TrainOptions};
use msvq::{DType, Error, Scalar, TrainConfig, TrainState};
use serde::Serialize;

use manifest::Manifest;

#[derive(Parser)]
#[command(name = "msvq", version, about = "Multi-view, multi-queue self-supervised learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain an encoder and write metrics and checkpoints.
    Train(TrainArgs),
    /// KNN or linear-probe accuracy of a checkpoint's student backbone.
    Eval(EvalArgs),
    /// Count false negatives among the teachers' top-ranked queue entries.
    Analyze(AnalyzeArgs),
}

/// Config sources shared by every subcommand. Precedence: file, then
/// `--set`/positional overrides, then the dedicated flags.
#[derive(Args)]
struct ConfigArgs {
    /// TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-key override such as `pretraining.tau_t=0.09`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Dotted-key overrides given positionally.
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn all_overrides(&self) -> Vec<String> {
        self.set.iter().chain(&self.overrides).cloned().collect()
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    seed: Option<u64>,
    /// moco, ressl, msv, mq or msvq.
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    epochs: Option<u64>,
    /// Run directory for the manifest, metrics and checkpoints.
    #[arg(long)]
    out_dir: PathBuf,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Knn,
    Linear,
}

impl Mode {
    fn name(self) -> &'static str {
        match self {
            Mode::Knn => "knn",
            Mode::Linear => "linear",
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "knn")]
    mode: Mode,
    /// Neighbours for KNN; defaults to `evaluation.k`.
    #[arg(long)]
    k: Option<usize>,
    /// Dataset, evaluation and fine-tuning overrides on top of the checkpoint's config.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Report directory; defaults to the run directory of the checkpoint.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    checkpoint: PathBuf,
    /// Top-k queue entries inspected per soft label.
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Also write test-split backbone features as CSV.
    #[arg(long)]
    export_embeddings: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Analyze(a) => cmd_analyze(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } | Error::Param { .. } | Error::Usage(_) | Error::Shape { .. } | Error::Capacity { .. } => 2,
        Error::NonFinite { .. } | Error::Degenerate { .. } => 3,
        Error::Io { .. } | Error::Checkpoint(_) | Error::Data(_) => 4,
    }
}

fn resolve_config(args: &TrainArgs) -> msvq::Result<TrainConfig> {
    let mut overrides = args.cfg.all_overrides();
    if let Some(s) = args.seed {
        overrides.push(format!("pretraining.seed={s}"));
    }
    if let Some(m) = &args.method {
        overrides.push(format!("pretraining.method=\"{m}\""));
    }
    if let Some(e) = args.epochs {
        overrides.push(format!("pretraining.epochs={e}"));
    }
    match &args.cfg.config {
        Some(path) => TrainConfig::load(path, &overrides),
        None => TrainConfig::from_toml_str("", &overrides),
    }
}

fn create_dir(dir: &Path) -> msvq::Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> msvq::Result<()> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    std::fs::write(path, text + "\n").map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn cmd_train(args: &TrainArgs) -> msvq::Result<()> {
    let config = match &args.resume {
        Some(path) => {
            let dtype = checkpoint_dtype(path)?;
            let mut cfg = match dtype {
                DType::F32 => load_checkpoint::<f32>(path)?.config,
                DType::F64 => load_checkpoint::<f64>(path)?.config,
            };
            if let Some(e) = args.epochs {
                cfg.pretraining.epochs = e;
            }
            cfg
        }
        None => resolve_config(args)?,
    };
    create_dir(&args.out_dir)?;
    let ckpt_dir = args.out_dir.join("checkpoints");
    let metrics_path = args.out_dir.join("metrics.jsonl");
    let mut manifest = Manifest::new("train", &config);
    manifest.artifacts.metrics = Some(metrics_path.clone());
    manifest.write(&args.out_dir)?;
    create_dir(&ckpt_dir)?;

    let dataset = config.dataset.load(Split::Train)?;
    log::info!(
        "{} on {} ({} images), {} epochs, precision {}",
        config.pretraining.method,
        config.dataset.name(),
        dataset.len(),
        config.pretraining.epochs,
        config.pretraining.precision.name()
    );
    let written = match config.pretraining.precision {
        DType::F32 => run_training::<f32>(&config, args.resume.as_deref(), &dataset, &ckpt_dir, &metrics_path)?,
        DType::F64 => run_training::<f64>(&config, args.resume.as_deref(), &dataset, &ckpt_dir, &metrics_path)?,
    };
    manifest.artifacts.checkpoints = written;
    manifest.write(&args.out_dir)?;
    Ok(())
}

/// Returns every checkpoint path written, oldest first.
fn run_training<T: Scalar>(
    config: &TrainConfig,
    resume: Option<&Path>,
    dataset: &msvq::data::LabeledImageDataset,
    ckpt_dir: &Path,
    metrics_path: &Path,
) -> msvq::Result<Vec<PathBuf>> {
    let (mut state, mut metrics) = match resume {
        Some(path) => {
            let mut s = load_checkpoint::<T>(path)?;
            s.config.pretraining.epochs = config.pretraining.epochs;
            (s, MetricsWriter::append(metrics_path)?)
        }
        None => (TrainState::<T>::new(config, dataset)?, MetricsWriter::create(metrics_path)?),
    };
    let first = state.epoch;
    let mut written = Vec::new();
    if resume.is_none() {
        let p = ckpt_dir.join(checkpoint_name(0));
        save_checkpoint(&state, &p)?;
        written.push(p);
    }
    let log = state.run(
        dataset,
        TrainOptions {
            metrics: Some(&mut metrics),
            checkpoint_dir: Some(ckpt_dir.to_path_buf()),
        },
    )?;
    written.extend((first + 1..=state.epoch).map(|e| ckpt_dir.join(checkpoint_name(e))));
    match (log.first(), log.last()) {
        (Some(a), Some(b)) => println!(
            "trained {} steps to epoch {}: loss {:.4} -> {:.4}",
            log.len(),
            state.epoch,
            a.loss,
            b.loss
        ),
        _ => println!("nothing to train: already at epoch {}", state.epoch),
    }
    Ok(written)
}

/// Report directory: explicit, else the run directory above `checkpoints/`.
fn report_dir(checkpoint: &Path, out_dir: Option<&Path>) -> PathBuf {
    if let Some(d) = out_dir {
        return d.to_path_buf();
    }
    let parent = checkpoint.parent().unwrap_or(Path::new("."));
    match parent.file_name() {
        Some(n) if n == "checkpoints" => parent.parent().unwrap_or(Path::new(".")).to_path_buf(),
        _ => parent.to_path_buf(),
    }
}

/// Applies overrides to a checkpoint's config echo.
fn reconfigure(config: &TrainConfig, set: &[String]) -> msvq::Result<TrainConfig> {
    if set.is_empty() {
        return Ok(config.clone());
    }
    TrainConfig::from_toml_str(&config.to_toml_string(), set)
}

fn cmd_eval(args: &EvalArgs) -> msvq::Result<()> {
    match checkpoint_dtype(&args.checkpoint)? {
        DType::F32 => eval_with::<f32>(args),
        DType::F64 => eval_with::<f64>(args),
    }
}

fn eval_with<T: Scalar>(args: &EvalArgs) -> msvq::Result<()> {
    let state = load_checkpoint::<T>(&args.checkpoint)?;
    let config = reconfigure(&state.config, &args.set)?;
    let train = config.dataset.load(Split::Train)?;
    let test = config.dataset.load(Split::Test)?;
    let student = &state.nets.student;
    let train_bank = extract_features(student, &train, &state.norm)?;
    let test_bank = extract_features(student, &test, &state.norm)?;
    let (k, accuracy) = match args.mode {
        Mode::Knn => {
            let knn = msvq::KnnConfig {
                k: args.k.unwrap_or(config.evaluation.k),
                ..config.evaluation.clone()
            };
            (Some(knn.k), knn_evaluate(&train_bank, &test_bank, &knn)?)
        }
        Mode::Linear => (
            None,
            linear_probe(&train_bank, &test_bank, train.class_count, &config.fine_tuning, config.pretraining.seed)?,
        ),
    };
    let report = EvalReport {
        method: config.pretraining.method.to_string(),
        dataset: config.dataset.name(),
        k,
        accuracy,
        class_count: train.class_count,
        train_size: train.len(),
        test_size: test.len(),
    };
    let dir = report_dir(&args.checkpoint, args.out_dir.as_deref());
    let path = dir.join(format!("eval_{}.json", args.mode.name()));
    let mut manifest = Manifest::open_or_new(&dir, "eval", &config)?;
    manifest.artifacts.reports.push(path.clone());
    manifest.write(&dir)?;
    write_json(&path, &report)?;
    println!("{}", serde_json::to_string(&report).expect("report serializes"));
    Ok(())
}

fn cmd_analyze(args: &AnalyzeArgs) -> msvq::Result<()> {
    match checkpoint_dtype(&args.checkpoint)? {
        DType::F32 => analyze_with::<f32>(args),
        DType::F64 => analyze_with::<f64>(args),
    }
}

fn analyze_with<T: Scalar>(args: &AnalyzeArgs) -> msvq::Result<()> {
    let mut state = load_checkpoint::<T>(&args.checkpoint)?;
    state.config = reconfigure(&state.config, &args.set)?;
    let train = state.config.dataset.load(Split::Train)?;
    let report = replay_false_negatives(&state, &train, args.k)?;
    let dir = report_dir(&args.checkpoint, args.out_dir.as_deref());
    let path = dir.join("false_negatives.json");
    let mut manifest = Manifest::open_or_new(&dir, "analyze", &state.config)?;
    manifest.artifacts.reports.push(path.clone());
    if let Some(p) = &args.export_embeddings {
        manifest.artifacts.reports.push(p.clone());
    }
    manifest.write(&dir)?;
    write_json(&path, &report)?;
    if let Some(p) = &args.export_embeddings {
        let test = state.config.dataset.load(Split::Test)?;
        export_embeddings(&extract_features(&state.nets.student, &test, &state.norm)?, p)?;
    }
    println!("{}", serde_json::to_string(&report).expect("report serializes"));
    Ok(())
}
