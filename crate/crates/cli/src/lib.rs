//! The `smagnet` command line: dataset generation, training, evaluation,
//! robustness sweeps, significance tests, diagnostics and reports.

mod commands;
pub mod config;
pub mod error;
mod run_dir;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use smagnet::eval::MissingPattern;
use smagnet::fusion::FusionMode;
use smagnet::model::ModelKind;

pub use config::RunConfig;
pub use error::{CliError, Kind};
pub use run_dir::{RunDir, CHECKPOINT_FILE, CONFIG_FILE, RUN_FILE};

#[derive(Debug, Parser)]
#[command(name = "smagnet", version, about = "SAR/MSI water segmentation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset with splits and normalization stats.
    GenData(GenDataArgs),
    /// Train a model and write the best checkpoint into a run directory.
    Train(TrainArgs),
    /// Evaluate a trained run on the test split.
    Eval(EvalArgs),
    /// Re-evaluate with MSI progressively removed.
    SweepMissing(SweepArgs),
    /// Mann-Whitney U test between two per-scene CSV files.
    Stats(StatsArgs),
    /// Export gate maps and the decoder-path discrepancy for one scene.
    Diagnose(DiagnoseArgs),
    /// Collect metrics of several runs into one table.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct GenDataArgs {
    /// Dataset directory to create.
    #[arg(long)]
    out: PathBuf,
    /// Number of scenes [default: 384].
    #[arg(long)]
    scenes: Option<usize>,
    /// Scene edge length in pixels, a multiple of 32 [default: 64].
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run config whose `data` section supplies the generator settings.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// JSON run config; built-in defaults when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory to create.
    #[arg(long)]
    out: PathBuf,
    /// Dataset directory; overrides `data.dir` of the config.
    #[arg(long)]
    data: Option<PathBuf>,
    /// smagnet, unet-sar or unet-concat.
    #[arg(long)]
    model: Option<ModelKind>,
    /// Fuse without the validity mask.
    #[arg(long)]
    no_spatial_mask: bool,
    /// Separate decoder weights for the fused and SAR paths.
    #[arg(long)]
    independent_decoders: bool,
    #[arg(long, value_enum)]
    fusion_mode: Option<FusionArg>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Do not log epochs to stderr.
    #[arg(long)]
    quiet: bool,
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
enum FusionArg {
    Complementary,
    Independent,
    Cross,
}

impl From<FusionArg> for FusionMode {
    fn from(f: FusionArg) -> Self {
        match f {
            FusionArg::Complementary => FusionMode::Complementary,
            FusionArg::Independent => FusionMode::Independent,
            FusionArg::Cross => FusionMode::Cross,
        }
    }
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Missing percentages, comma separated [default: 0,25,50,75,100].
    #[arg(long, value_delimiter = ',')]
    ratios: Option<Vec<u32>>,
    /// band or blobs [default: band].
    #[arg(long)]
    pattern: Option<MissingPattern>,
    /// Injection seeds per ratio [default: 3].
    #[arg(long)]
    seeds: Option<usize>,
}

#[derive(Debug, Args)]
struct StatsArgs {
    /// Per-scene CSV of the first model.
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    #[arg(long, default_value = "iou")]
    column: String,
    /// Also write the result as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DiagnoseArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    scene: String,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Remove this fraction of MSI (band pattern) before the forward pass.
    #[arg(long)]
    missing_ratio: Option<f64>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Evaluated run directories.
    #[arg(long, num_args = 1.., required = true)]
    runs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code. Failures are reported as one JSON line on stderr.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let msg = e.render().to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("{}", CliError::new(Kind::Usage, first).to_json());
            return Kind::Usage.exit_code();
        }
    };
    match dispatch(cli.command) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            e.kind.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> error::Result<serde_json::Value> {
    match cmd {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::SweepMissing(a) => commands::sweep(a),
        Command::Stats(a) => commands::stats(a),
        Command::Diagnose(a) => commands::diagnose(a),
        Command::Report(a) => commands::report(a),
    }
}
