//! Command-line front end: synthetic data, training, evaluation, prediction
//! and the attention benchmark.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use conformer_core::attention::AttentionPath;
use conformer_core::dataio::ForecastMode;
use conformer_core::inputrep::InputVariant;
use conformer_core::model::LayerChoice;
use conformer_core::normflow::NfVariant;
use conformer_core::ErrorKind;

use config::{parse_enum, UsageError};

#[derive(Parser, Debug)]
#[command(name = "conformer", version, about = "Long-horizon time-series forecasting")]
struct Cli {
    /// Log progress to standard error.
    #[arg(long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic sinusoid dataset.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint and history.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split.
    Eval(EvalArgs),
    /// Forecast from a checkpoint.
    Predict(PredictArgs),
    /// Time banded against dense windowed attention.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of rows.
    #[arg(long = "L", default_value_t = 2000)]
    pub len: usize,
    /// Number of variables.
    #[arg(long, default_value_t = 4)]
    pub dx: usize,
    /// Comma-separated periods, reused cyclically across variables.
    #[arg(long, value_delimiter = ',', default_value = "24,24,48,96")]
    pub periods: Vec<f64>,
    #[arg(long, default_value_t = 0.0)]
    pub trend_slope: f64,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
    #[arg(long, default_value = "synth.csv")]
    pub out: PathBuf,
}

/// Overrides applied on top of the config file.
#[derive(Args, Debug, Default)]
pub struct ModelFlags {
    /// JSON config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Target column name.
    #[arg(long)]
    pub target: Option<String>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Train/validation/test fractions, e.g. 0.7,0.1,0.2.
    #[arg(long, value_delimiter = ',')]
    pub split_fractions: Option<Vec<f64>>,
    /// Train/validation/test lengths in calendar months, e.g. 12,4,4.
    #[arg(long, value_delimiter = ',', conflicts_with = "split_fractions")]
    pub split_months: Option<Vec<u32>>,
    #[arg(long)]
    pub interval_seconds: Option<i64>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    /// Sliding-window span (even).
    #[arg(long)]
    pub w: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub eta: Option<usize>,
    #[arg(long)]
    pub decomp_kernel: Option<usize>,
    #[arg(long)]
    pub transforms: Option<usize>,
    #[arg(long)]
    pub input_len: Option<usize>,
    #[arg(long)]
    pub pred_len: Option<usize>,
    #[arg(long)]
    pub token_len: Option<usize>,
    #[arg(long, value_parser = parse_enum::<ForecastMode>)]
    pub mode: Option<ForecastMode>,
    #[arg(long, value_parser = parse_enum::<InputVariant>)]
    pub input_variant: Option<InputVariant>,
    #[arg(long, value_parser = parse_enum::<NfVariant>)]
    pub nf_variant: Option<NfVariant>,
    #[arg(long, value_parser = parse_enum::<LayerChoice>)]
    pub latent_encoder: Option<LayerChoice>,
    #[arg(long, value_parser = parse_enum::<LayerChoice>)]
    pub latent_decoder: Option<LayerChoice>,
    #[arg(long, value_parser = parse_enum::<AttentionPath>)]
    pub attention: Option<AttentionPath>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub train_stride: Option<usize>,
    #[arg(long)]
    pub eval_samples: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub flags: ModelFlags,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Split to evaluate: train, val or test.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Metrics CSV; defaults to `metrics.csv` beside the checkpoint.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write standardized per-window predictions with targets.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[command(flatten)]
    pub flags: ModelFlags,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "forecast.csv")]
    pub out: PathBuf,
    /// Flow draws per window.
    #[arg(long, default_value_t = 8)]
    pub samples: usize,
    /// Forecast every stride-th window instead of only the last one.
    #[arg(long)]
    pub stride: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_value = "512,1024,2048,4096")]
    pub lengths: Vec<usize>,
    #[arg(long, default_value_t = 20)]
    pub trials: usize,
    #[arg(long, default_value_t = 10)]
    pub warmup: usize,
    #[arg(long, default_value_t = 32)]
    pub w: usize,
    #[arg(long, default_value_t = 32)]
    pub d: usize,
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
    #[arg(long, default_value = "bench.csv")]
    pub out: PathBuf,
}

#[global_allocator]
static ALLOC: conformer_core::bench::CountingAlloc = conformer_core::bench::CountingAlloc;

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<conformer_core::Error>() {
            return match e.kind() {
                ErrorKind::Usage => 1,
                ErrorKind::Data => 2,
                ErrorKind::Numeric => 3,
            };
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind as K;
            if matches!(e.kind(), K::DisplayHelp | K::DisplayVersion | K::DisplayHelpOnMissingArgumentOrSubcommand) {
                let _ = e.print();
                return if e.kind() == K::DisplayHelpOnMissingArgumentOrSubcommand { ExitCode::from(1) } else { ExitCode::SUCCESS };
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("usage: {first}");
            return ExitCode::from(1);
        }
    };
    env_logger::Builder::new()
        .filter_level(if cli.verbose { log::LevelFilter::Info } else { log::LevelFilter::Warn })
        .format_timestamp(None)
        .init();
    let (stage, result) = match cli.command {
        Command::Synth(a) => ("synth", commands::synth(a)),
        Command::Train(a) => ("train", commands::train(a)),
        Command::Eval(a) => ("eval", commands::eval(a)),
        Command::Predict(a) => ("predict", commands::predict(a)),
        Command::Bench(a) => ("bench", commands::bench(a)),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = format!("{e:#}").replace('\n', " ");
            eprintln!("{stage}: {line}");
            ExitCode::from(exit_code(&e))
        }
    }
}
