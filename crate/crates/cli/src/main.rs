mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::{CliError, CliResult, EXIT_USAGE};

/// Synthetic MRI batch generation, feature robustness evaluation and
/// one-layer adapters.
#[derive(Parser, Debug)]
#[command(name = "anatsynth", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate one subject's mini-batch of synthetic samples.
    Generate(GenerateArgs),
    /// Score feature stacks with the intra- or inter-subject protocol.
    Evaluate(EvaluateArgs),
    /// Fit a voxel-wise linear adapter in closed form.
    FitAdapter(FitAdapterArgs),
    /// Apply a fitted adapter to a feature stack.
    ApplyAdapter(ApplyAdapterArgs),
    /// Compare two images with one metric.
    Metrics(MetricsArgs),
    /// Write a seeded synthetic subject (labels + T1 image).
    Phantom(PhantomArgs),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    labels: PathBuf,
    #[arg(long)]
    mprage: PathBuf,
    #[arg(long, default_value_t = 4)]
    n: usize,
    #[arg(long)]
    seed: u64,
    /// Comma-separated severity names, e.g. `mild,medium,medium,severe`.
    #[arg(long)]
    schedule: Option<String>,
    /// Subject id used for seeding; defaults to the label file stem.
    #[arg(long)]
    subject: Option<String>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Intra,
    Inter,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long, value_enum)]
    mode: ModeArg,
    #[arg(long)]
    reference: PathBuf,
    #[arg(long)]
    candidates: PathBuf,
    /// Subject-to-atlas displacement field, required in inter mode.
    #[arg(long)]
    atlas_map: Option<PathBuf>,
    /// Label map; its foreground eroded by 2 voxels is scored.
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long, default_value = "report.json")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct FitAdapterArgs {
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    concat_input: Option<PathBuf>,
    #[arg(long, default_value_t = anatsynth::adaptation::DEFAULT_RIDGE)]
    ridge: f64,
    /// Treat the target as a label map with this channel order, e.g. `0,1,2`.
    #[arg(long)]
    segmentation: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ApplyAdapterArgs {
    #[arg(long)]
    adapter: PathBuf,
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    concat_input: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MetricArg {
    L1,
    Psnr,
    Ssim,
    Msssim,
    Dice,
    Norml2,
}

#[derive(Args, Debug)]
struct MetricsArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long, value_enum)]
    metric: MetricArg,
    /// Label map or binary image restricting l1 / ssim / msssim / norml2.
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    scales: usize,
    #[arg(long, default_value_t = 1.0)]
    peak: f64,
}

#[derive(Args, Debug)]
struct PhantomArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value = "phantom")]
    id: String,
    #[arg(long, default_value_t = 64)]
    dims: usize,
    #[arg(long)]
    out: PathBuf,
}

pub const THREADS_ENV: &str = "BRAINID_THREADS";

fn configure_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else { return Ok(()) };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::usage(format!("{THREADS_ENV} must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::usage(e.to_string()))
}

fn run(cli: Cli) -> CliResult<()> {
    configure_threads()?;
    match cli.command {
        Command::Generate(a) => commands::generate(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::FitAdapter(a) => commands::fit_adapter(a),
        Command::ApplyAdapter(a) => commands::apply_adapter(a),
        Command::Metrics(a) => commands::metrics(a),
        Command::Phantom(a) => commands::phantom(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
