mod commands;
mod dataset;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use umyops::trainer::PriorMode;

/// Environment variable naming the default dataset directory.
pub const DATA_ROOT_ENV: &str = "UMYOPS_DATA_ROOT";

#[derive(Parser, Debug)]
#[command(name = "umyops", version, about = "Multi-sequence cardiac MR registration and pathology segmentation")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// JSON config file; keys override the defaults of the command.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads for per-sample work.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset with known misalignments.
    Phantom(PhantomArgs),
    /// Train stage 1 (registration and myocardium) or stage 2 (pathology).
    Train(TrainArgs),
    /// Predict aligned images and labels for every sample of a dataset.
    Infer(InferArgs),
    /// Score a checkpoint, or saved predictions, against gold labels.
    Evaluate(EvaluateArgs),
    /// Scar and edema size, transmurality and plots.
    Quantify(QuantifyArgs),
}

#[derive(Args, Debug)]
pub struct PhantomArgs {
    #[arg(long, default_value_t = 50)]
    pub count: usize,
    /// Largest control-point displacement of bSSFP and T2, in pixels.
    #[arg(long, default_value_t = 8.0)]
    pub misalign: f64,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub stage: u8,
    #[arg(long, env = DATA_ROOT_ENV)]
    pub data: PathBuf,
    /// Stage-1 checkpoint (the run directory or its `stage1/`).
    #[arg(long)]
    pub from_stage1: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Trailing fraction of the sorted samples held out for validation.
    #[arg(long, default_value_t = 0.2)]
    pub val_fraction: f64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum PriorArg {
    True,
    Uniform,
    Shuffled,
}

impl From<PriorArg> for PriorMode {
    fn from(p: PriorArg) -> Self {
        match p {
            PriorArg::True => PriorMode::True,
            PriorArg::Uniform => PriorMode::Uniform,
            PriorArg::Shuffled => PriorMode::Shuffled,
        }
    }
}

#[derive(Args, Debug)]
pub struct InferArgs {
    /// Stage-2 checkpoint (the run directory or its `stage2/`).
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, env = DATA_ROOT_ENV)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "true")]
    pub prior: PriorArg,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long, env = DATA_ROOT_ENV)]
    pub data: PathBuf,
    #[arg(long, conflicts_with = "predictions", required_unless_present = "predictions")]
    pub checkpoint: Option<PathBuf>,
    /// Directory of saved predictions (output of `infer`, or a dataset).
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "true")]
    pub prior: PriorArg,
}

#[derive(Args, Debug)]
pub struct QuantifyArgs {
    #[arg(long, env = DATA_ROOT_ENV)]
    pub data: PathBuf,
    /// Saved predictions; compared against the gold quantification.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Phantom(a) => commands::phantom(&cli.common, &a),
        Command::Train(a) => commands::train(&cli.common, &a),
        Command::Infer(a) => commands::infer(&cli.common, &a),
        Command::Evaluate(a) => commands::evaluate(&cli.common, &a),
        Command::Quantify(a) => commands::quantify(&cli.common, &a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 3 for numeric failures, 2 for everything else.
pub fn exit_code(e: &umyops::Error) -> u8 {
    match e {
        umyops::Error::Numeric(_) => 3,
        _ => 2,
    }
}
