use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod error;
mod manifest;

/// Composite-dataset generation, latent patch optimization, simulated
/// distance sweeps and reporting for STOP-sign patch studies.
#[derive(Debug, Parser)]
#[command(name = "signpatch", version)]
pub struct Cli {
    /// JSON file with optional `seed`, `compose`, `attack` and `evaluate`
    /// sections. Flags override file values.
    #[arg(long, global = true, value_name = "JSON")]
    pub config: Option<PathBuf>,
    /// Master seed for every random draw.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; 1 is the reference deterministic mode.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Paste sign crops onto undistorted backgrounds and re-distort them.
    Compose(ComposeArgs),
    /// Optimize a patch in a generator's latent space against a detector.
    Attack(AttackArgs),
    /// Run the clean/patched distance sweep and log per-frame confidences.
    Evaluate(EvaluateArgs),
    /// Summarize records.csv into tables and a confidence-versus-distance plot.
    Report(ReportArgs),
    /// Serve the toy detector over the line protocol on stdin/stdout.
    #[command(hide = true)]
    ServeToyDetector(ServeArgs),
}

#[derive(Debug, Args)]
pub struct ComposeArgs {
    /// Camera calibration JSON.
    #[arg(long, value_name = "JSON")]
    pub calib: PathBuf,
    /// Directory of sign crops, one subdirectory per numeric class id.
    #[arg(long, value_name = "DIR")]
    pub signs: PathBuf,
    /// Directory of background PNGs.
    #[arg(long, value_name = "DIR")]
    pub backgrounds: PathBuf,
    /// Backgrounds are already undistorted.
    #[arg(long)]
    pub undistorted: bool,
    /// Samples per class (default: one per sign instance).
    #[arg(long, value_name = "N")]
    pub per_class: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum GeneratorKind {
    ToySigmoid,
    ToyLinear,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum UpdateKind {
    Sgd,
    Momentum,
    Adam,
}

#[derive(Debug, Args)]
pub struct AttackArgs {
    /// Dataset directory produced by `compose`.
    #[arg(long, value_name = "DIR")]
    pub dataset: PathBuf,
    /// Comma-separated initialization labels.
    #[arg(long, value_delimiter = ',', value_name = "LABELS")]
    pub init: Option<Vec<String>>,
    /// Iterations per initialization.
    #[arg(long)]
    pub iters: Option<usize>,
    /// Step size.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Total-variation weight.
    #[arg(long)]
    pub lambda_tv: Option<f64>,
    #[arg(long, value_enum)]
    pub update: Option<UpdateKind>,
    /// Patch anchor on the sign face: center, upper or lower.
    #[arg(long)]
    pub slot: Option<String>,
    /// Patch side over the sign-box side, in (0, 1].
    #[arg(long)]
    pub size_fraction: Option<f64>,
    /// Save a checkpoint every N iterations (0 disables).
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    /// Save the candidate patch every N iterations (0 disables).
    #[arg(long, default_value_t = 10)]
    pub candidate_every: usize,
    /// Resume from a checkpoint JSON.
    #[arg(long, value_name = "JSON")]
    pub resume: Option<PathBuf>,
    /// External detector command speaking the line protocol; the built-in toy
    /// detector is used otherwise.
    #[arg(long, value_name = "CMD")]
    pub detector_cmd: Option<String>,
    #[arg(long, value_enum, default_value_t = GeneratorKind::ToySigmoid)]
    pub generator: GeneratorKind,
    /// Generated patch side in pixels.
    #[arg(long, default_value_t = 32)]
    pub patch_side: usize,
    #[arg(long, default_value_t = 16)]
    pub latent_dim: usize,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Learned patch as NAME=PNG; repeatable. Replaces the configured list.
    #[arg(long = "nap", value_name = "NAME=PNG")]
    pub naps: Vec<String>,
    /// Comma-separated distances in meters.
    #[arg(long, value_delimiter = ',')]
    pub distances: Option<Vec<f64>>,
    /// Frames per cell.
    #[arg(long)]
    pub window: Option<usize>,
    /// Brightness jitter bound in 8-bit steps.
    #[arg(long)]
    pub jitter: Option<u8>,
    /// Camera calibration JSON for the renderer.
    #[arg(long, value_name = "JSON")]
    pub calib: Option<PathBuf>,
    /// Background PNG (default: synthetic).
    #[arg(long, value_name = "PNG")]
    pub background: Option<PathBuf>,
    /// Sign PNG (default: synthetic).
    #[arg(long, value_name = "PNG")]
    pub sign: Option<PathBuf>,
    /// External detector command speaking the line protocol.
    #[arg(long, value_name = "CMD")]
    pub detector_cmd: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PlotFormat {
    Svg,
    Png,
    Both,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// records.csv from `evaluate` (default: <out>/records.csv).
    #[arg(long, value_name = "CSV")]
    pub records: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = PlotFormat::Svg)]
    pub plot: PlotFormat,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value_t = 640)]
    pub width: usize,
    #[arg(long, default_value_t = 480)]
    pub height: usize,
    /// Expose input gradients.
    #[arg(long)]
    pub gradients: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("signpatch: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
