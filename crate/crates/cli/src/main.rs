use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod manifest;

/// Failures split by exit code: usage and config problems exit 2, everything else 1.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<protodiv::Error> for CliError {
    fn from(e: protodiv::Error) -> Self {
        match e {
            protodiv::Error::Config(_) => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<image::ImageError> for CliError {
    fn from(e: image::ImageError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "protodiv", version, about = "Prototype-based weakly supervised segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write checkpoints, loss logs and a run manifest.
    Train(TrainArgs),
    /// Score a checkpoint (or a directory of predicted masks) against ground truth.
    Eval(EvalArgs),
    /// Train and evaluate every (k, lambda_div) cell of a grid.
    Sweep(SweepArgs),
    /// Write class and prototype heatmaps plus foreground overlays.
    ExportHeatmaps(HeatmapArgs),
    /// Generate a synthetic dataset in the on-disk layout.
    Synth(SynthArgs),
    /// Serve the stub region encoder over the framed stdin/stdout protocol.
    RegionEncoderStub(StubArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

/// Options shared by every command that builds a config.
#[derive(Args, Debug, Clone)]
pub struct ConfigArgs {
    /// TOML config file; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dotted-path override, e.g. `--set trainer.lambda_div=0.5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Shorthand for `--set trainer.seed=N`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Shorthand for `--set crf.enabled=true|false`.
    #[arg(long)]
    pub crf: Option<Switch>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Dataset root with train/ (and optionally val/) splits.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long, required_unless_present = "predictions", conflicts_with = "predictions")]
    pub checkpoint: Option<PathBuf>,
    /// Directory of `<id>.png` label maps to score instead of a model.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Defaults to the checkpoint's `crf.enabled`.
    #[arg(long)]
    pub crf: Option<Switch>,
    /// Overrides of `crf.*` settings for this evaluation.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long, default_value_t = 10)]
    pub batch_size: usize,
    /// Also write metrics.tsv, metrics.txt and eval.json here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Prototype counts per class.
    #[arg(long, value_delimiter = ',', required = true)]
    pub k: Vec<usize>,
    /// Diversity weights.
    #[arg(long = "lambda-div", value_delimiter = ',', required = true)]
    pub lambda_div: Vec<f64>,
    /// Split every cell is evaluated on.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Stop after computing this many uncached cells; a rerun resumes.
    #[arg(long)]
    pub max_new_cells: Option<usize>,
}

#[derive(Args, Debug)]
pub struct HeatmapArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Sample ids to export; all samples of the split when omitted.
    #[arg(long, value_delimiter = ',')]
    pub ids: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub train: usize,
    #[arg(long, default_value_t = 40)]
    pub val: usize,
    #[arg(long, default_value_t = 40)]
    pub test: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct StubArgs {
    /// Matches the default `refiner.region_encoder_seed`.
    #[arg(long, default_value_t = 0x5eed)]
    pub seed: u64,
    #[arg(long, default_value_t = 16)]
    pub size: usize,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let result = match cli.command {
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Sweep(a) => commands::sweep(&a),
        Command::ExportHeatmaps(a) => commands::export_heatmaps(&a),
        Command::Synth(a) => commands::synth(&a),
        Command::RegionEncoderStub(a) => commands::region_encoder_stub(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
