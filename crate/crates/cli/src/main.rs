use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hoigen::error::ErrorKind;

mod commands;

/// Compositional HOI generalization experiments on feature vectors.
#[derive(Parser)]
#[command(name = "hoigen", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    Gen(GenArgs),
    /// Train one verb stream.
    Train(TrainArgs),
    /// Train the object classifier and feature synthesizer.
    Synth(SynthArgs),
    /// Fit calibration and fusion on validation scores.
    Calibrate(CalibrateArgs),
    /// Write pseudo-label verdicts for the unlabeled split.
    Pseudo(PseudoArgs),
    /// Score a detection file against ground truth.
    Eval(EvalArgs),
    /// Run the whole experiment and write one report.
    Pipeline(PipelineArgs),
}

#[derive(Clone, Copy, ValueEnum)]
pub enum StreamArg {
    Human,
    Object,
    Spatial,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Default,
    Known,
}

#[derive(Args)]
pub struct GenArgs {
    /// Generator configuration; defaults apply when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub spurious_strength: Option<f64>,
    #[arg(long)]
    pub unseen_fraction: Option<f64>,
    /// non-rare-first, rare-first or random.
    #[arg(long)]
    pub holdout: Option<String>,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Dataset directory written by `gen`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub stream: StreamArg,
    #[arg(long, default_value_t = 7e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 40)]
    pub epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_delimiter = ',', default_value = "32")]
    pub hidden: Vec<usize>,
    /// Gradient-norm clip; 0 disables.
    #[arg(long, default_value_t = 1.0)]
    pub clip_norm: f64,
    /// Train with plain BCE and no variance head.
    #[arg(long)]
    pub no_uqm: bool,
    /// Add uncertainty-guided training on the unlabeled split.
    #[arg(long)]
    pub extra_data: bool,
    #[arg(long, default_value_t = 0.1)]
    pub alpha: f64,
    #[arg(long, default_value_t = 1.0)]
    pub unlabeled_ratio: f64,
    /// Synthesizer checkpoint; object stream only, enables synthesized training.
    #[arg(long)]
    pub synth: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write stream outputs for every pair.
    #[arg(long)]
    pub scores_out: Option<PathBuf>,
}

#[derive(Args)]
pub struct SynthArgs {
    /// Object-stream feature file.
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// Pair records, for object categories.
    #[arg(long)]
    pub pairs: PathBuf,
    /// Split tags; when given only training pairs are used.
    #[arg(long)]
    pub splits: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    pub dup_prob: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_delimiter = ',', default_value = "32")]
    pub classifier_hidden: Vec<usize>,
    #[arg(long, default_value_t = 30)]
    pub classifier_epochs: usize,
    #[arg(long, value_delimiter = ',', default_value = "32")]
    pub synth_hidden: Vec<usize>,
    #[arg(long, default_value_t = 10)]
    pub synth_epochs: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct CalibrateArgs {
    /// Score files from `train --scores-out`; repeat once per stream.
    #[arg(long, required = true)]
    pub val_scores: Vec<PathBuf>,
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long, default_value_t = 1.0)]
    pub beta: f64,
    #[arg(long, default_value_t = 0.1)]
    pub gamma: f64,
    #[arg(long, default_value_t = 2)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Write fused detections for the test pairs; needs `--pairs` and `--vocab`.
    #[arg(long, requires_all = ["pairs", "vocab"])]
    pub det_out: Option<PathBuf>,
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
}

#[derive(Args)]
pub struct PseudoArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Stream checkpoint from `train`.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub det: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::Default)]
    pub mode: ModeArg,
    #[arg(long, default_value_t = 0.5)]
    pub iou: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct PipelineArgs {
    /// Experiment configuration; flags below override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub oil: Option<bool>,
    #[arg(long)]
    pub uqm: Option<bool>,
    #[arg(long)]
    pub cui: Option<bool>,
    #[arg(long)]
    pub extra_data: Option<bool>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub dup_prob: Option<f64>,
    /// Add the run with object-immune training switched off.
    #[arg(long)]
    pub compare: bool,
}

pub const THREADS_ENV: &str = "HOIGEN_THREADS";

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Validation => 1,
        ErrorKind::Io => 2,
        ErrorKind::Numeric => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    if let Ok(v) = std::env::var(THREADS_ENV) {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => {
                eprintln!("error: {THREADS_ENV} must be a positive integer, got `{v}`");
                return ExitCode::from(1);
            }
        }
    }
    let result = match cli.command {
        Command::Gen(a) => commands::gen(a),
        Command::Train(a) => commands::train(a),
        Command::Synth(a) => commands::synth(a),
        Command::Calibrate(a) => commands::calibrate(a),
        Command::Pseudo(a) => commands::pseudo(a),
        Command::Eval(a) => commands::eval(a),
        Command::Pipeline(a) => commands::pipeline(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.kind()))
        }
    }
}
