//! Command-line front end: mesh tools, dataset generation, training,
//! evaluation, benchmarking, one-off FEM solves and the grasp server.
//!
//! Every subcommand prints one JSON summary on stdout. Failures print one
//! JSON error object on stderr and map to exit codes 2 (usage), 3 (invalid
//! input), 4 (solver failure) and 5 (internal invariant).

pub mod commands;
pub mod error;
pub mod inputs;
pub mod server;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use softgrasp::dataset::DataRegime;
use softgrasp::neural::Regime;
use softgrasp::service::Mode;

pub use error::{CliError, CliResult, Kind};

#[derive(Debug, Parser)]
#[command(name = "softgrasp", version, about = "Grasp-driven soft-tissue deformation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print mesh statistics, optionally exporting it as JSON.
    MeshInfo(MeshInfoArgs),
    /// Generate an FEM dataset of grasp samples.
    Gen(GenArgs),
    /// Train a surrogate on a dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Time one deformation backend on random grasps.
    Bench(BenchArgs),
    /// Solve one FEM problem.
    Solve(SolveArgs),
    /// Serve interactive grasp sessions over websocket.
    Serve(ServeArgs),
}

#[derive(Debug, Clone, Args)]
pub struct MeshArgs {
    /// Mesh file (`.msh` or JSON), or `synth:desk` / `synth:large`.
    #[arg(long)]
    pub mesh: String,
    /// Multiplier converting file units to meters.
    #[arg(long, default_value_t = 1.0)]
    pub unit_scale: f64,
}

#[derive(Debug, Args)]
pub struct MeshInfoArgs {
    #[command(flatten)]
    pub mesh: MeshArgs,
    /// Write the mesh in JSON form here.
    #[arg(long)]
    pub write: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RegimeArg {
    Linear,
    Nonlinear,
}

impl From<RegimeArg> for DataRegime {
    fn from(r: RegimeArg) -> Self {
        match r {
            RegimeArg::Linear => DataRegime::Linear,
            RegimeArg::Nonlinear => DataRegime::Nonlinear,
        }
    }
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[command(flatten)]
    pub mesh: MeshArgs,
    /// JSON config; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub arity: Option<u8>,
    #[arg(long, value_enum)]
    pub regime: Option<RegimeArg>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads. Output does not depend on this.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TrainRegimeArg {
    Base,
    Residual,
    Regularized,
}

impl From<TrainRegimeArg> for Regime {
    fn from(r: TrainRegimeArg) -> Self {
        match r {
            TrainRegimeArg::Base => Regime::Base,
            TrainRegimeArg::Residual => Regime::Residual,
            TrainRegimeArg::Regularized => Regime::Regularized,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub regime: Option<TrainRegimeArg>,
    /// JSON training config; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub lambda_reg: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Standardize inputs and scale outputs (`--normalize false` to disable).
    #[arg(long)]
    pub normalize: Option<bool>,
    /// Choose the Kelvinlet radius on the training split before training.
    #[arg(long)]
    pub calibrate_epsilon: bool,
    /// Per-epoch log as JSON lines.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    /// Held-out samples of the checkpoint's training split.
    Test,
    All,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    /// Per-sample rows of the model as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Store wall-clock latencies in the report (makes it non-reproducible).
    #[arg(long)]
    pub timing: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Kelvinlet,
    Neural,
    Fem,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Kelvinlet => Mode::Kelvinlet,
            ModeArg::Neural => Mode::Neural,
            ModeArg::Fem => Mode::Fem,
        }
    }
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub mesh: MeshArgs,
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2), default_value_t = 2)]
    pub graspers: u8,
    #[arg(long, value_enum)]
    pub mode: ModeArg,
    #[arg(long, default_value_t = 20)]
    pub repeat: usize,
    /// Untimed runs before measuring.
    #[arg(long, default_value_t = 2)]
    pub warmup: usize,
    /// Neural checkpoint; without one an untrained network is timed.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Material of the FEM backend and of the DCM reference.
    #[arg(long, value_enum, default_value_t = RegimeArg::Linear)]
    pub regime: RegimeArg,
    /// Also score each field against an FEM reference solve.
    #[arg(long)]
    pub dcm: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads for the reference solves. Timing runs sequentially.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    #[command(flatten)]
    pub mesh: MeshArgs,
    /// `{"grasps":[{"node":i,"u":[x,y,z]}]}` or `{"fixed":[..],"prescribed":{"i":[x,y,z]}}`.
    #[arg(long)]
    pub bc: PathBuf,
    #[arg(long, value_enum, default_value_t = RegimeArg::Linear)]
    pub regime: RegimeArg,
    /// Material JSON replacing the regime default.
    #[arg(long)]
    pub material: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[command(flatten)]
    pub mesh: MeshArgs,
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// 0 picks a free port; the bound address is printed.
    #[arg(long, default_value_t = 8765)]
    pub port: u16,
    /// Material of the FEM backend.
    #[arg(long, value_enum, default_value_t = RegimeArg::Linear)]
    pub regime: RegimeArg,
}

/// Runs the CLI and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let err = CliError::usage(e.render().to_string().trim().to_string());
            eprintln!("{}", err.to_json());
            return err.kind.exit_code();
        }
    };
    match commands::dispatch(cli.command) {
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
