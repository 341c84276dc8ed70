//! `curvespot` command-line interface.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use curvespot::objective::Strategy;

#[derive(Parser, Debug)]
#[command(
    name = "curvespot",
    version,
    about = "Arbitrary-shape scene text spotting"
)]
struct Cli {
    /// TOML run configuration; defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `seed` from the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `data_dir` from the configuration.
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    /// Overrides `checkpoint_dir` from the configuration.
    #[arg(long, global = true)]
    checkpoint_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset: train and val splits plus a partially labeled pool.
    Gen(GenArgs),
    /// Train a model and write checkpoints and a per-sample loss log.
    Train(TrainArgs),
    /// Run a trained model on images and write detections as JSON.
    Infer(InferArgs),
    /// Score detections against a dataset.
    Eval(EvalArgs),
    /// Train and evaluate the four single-step ablation configurations.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
pub struct GenArgs {
    /// Training images, including the partially labeled pool.
    #[arg(long)]
    pub num_samples: Option<usize>,
    /// Validation images.
    #[arg(long)]
    pub num_val: Option<usize>,
    /// Share of training images moved to the partially labeled pool.
    #[arg(long)]
    pub partial_fraction: Option<f64>,
    /// Overwrite a nonempty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Steps to run; when resuming, steps on top of the checkpoint.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Continue from the checkpoint in the checkpoint directory.
    #[arg(long)]
    pub resume: bool,
    /// Crop recognizer features without the instance mask.
    #[arg(long)]
    pub no_roi_masking: bool,
    /// Train on fully labeled images only.
    #[arg(long)]
    pub no_partial_data: bool,
    /// Single-step joint training, or detector first then joint.
    #[arg(long, value_enum)]
    pub strategy: Option<StrategyArg>,
    /// Detector-only steps of the two-step strategy.
    #[arg(long)]
    pub phase1_steps: Option<usize>,
    /// Loss log path; defaults to `losses.csv` in the checkpoint directory.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(clap::ValueEnum, Clone, Copy, Debug)]
pub enum StrategyArg {
    Single,
    Two,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Single => Strategy::Single,
            StrategyArg::Two => Strategy::Two,
        }
    }
}

#[derive(Args, Debug)]
pub struct InferArgs {
    /// Image files to process.
    #[arg(long = "image")]
    pub images: Vec<PathBuf>,
    /// Dataset index whose images are processed.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Output JSON; stdout when omitted.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Directory for per-step attention heatmaps.
    #[arg(long)]
    pub attention: Option<PathBuf>,
    /// Minimum detection score to report.
    #[arg(long)]
    pub score_threshold: Option<f64>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Detections JSON written by `infer`.
    #[arg(long)]
    pub detections: PathBuf,
    /// Dataset index holding the ground truth.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Report JSON; stdout when omitted.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Minimum IoU for a match.
    #[arg(long)]
    pub iou_threshold: Option<f64>,
    /// Compare transcriptions ignoring case.
    #[arg(long)]
    pub case_insensitive: bool,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    /// Training steps per configuration.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Run only the named configurations.
    #[arg(long = "variant")]
    pub variants: Vec<String>,
    /// Result JSON; the table is always printed.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

fn error_line(kind: &str, message: &str) -> String {
    serde_json::json!({ "error": kind, "message": message }).to_string()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg
                .lines()
                .next()
                .unwrap_or("")
                .trim_start_matches("error: ");
            eprintln!("{}", error_line("usage", first));
            return ExitCode::from(2);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line("failure", &format!("{e:#}")));
            ExitCode::FAILURE
        }
    }
}
