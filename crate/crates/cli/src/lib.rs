//! Command-line driver: distance transforms, training, evaluation,
//! inference, gradient checks, timing and synthetic data export.
//!
//! Exit codes: 0 success, 2 input error, 3 training divergence,
//! 4 failed check.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use config::{FileSet, Precision, RunConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;
pub const EXIT_CHECK: i32 = 4;

/// Environment variable capping worker threads (0 = one per core).
pub const THREADS_ENV: &str = "SDTSEG_THREADS";

#[derive(Debug)]
pub enum Failure {
    Input(anyhow::Error),
    Diverged(String),
    Check(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Input(_) => EXIT_INPUT,
            Failure::Diverged(_) => EXIT_DIVERGED,
            Failure::Check(_) => EXIT_CHECK,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Input(e) => write!(f, "{e:#}"),
            Failure::Diverged(m) | Failure::Check(m) => f.write_str(m),
        }
    }
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Input(e.into())
    }
}

#[derive(Debug, Parser)]
#[command(name = "sdtseg", version, about = "Segmentation with signed distance transform regression")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Class-wise clipped signed distance transform of a PGM mask, written as SDTF.
    Sdt(SdtArgs),
    /// Train a network from a JSON run configuration.
    Train {
        config: PathBuf,
    },
    /// Sliding-window evaluation; prints a metrics report as JSON.
    Eval(EvalArgs),
    /// Predict a label mask for one image.
    Infer(InferArgs),
    /// Compare analytic gradients with central differences.
    Gradcheck(GradcheckArgs),
    /// Time the exact distance transform at several sizes.
    Bench(BenchArgs),
    /// Write the configured synthetic dataset to files.
    Synth {
        config: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct SdtArgs {
    pub mask: PathBuf,
    #[arg(long, default_value_t = sdtseg::edt::DEFAULT_CLIP)]
    pub clip: f64,
    /// Class count; inferred from the mask when absent.
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    pub weights: PathBuf,
    pub config: PathBuf,
    #[arg(long, value_enum, default_value_t = Split::Val)]
    pub split: Split,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    pub weights: PathBuf,
    /// 3-channel SDTF image.
    pub image: PathBuf,
    /// Output PGM label mask.
    #[arg(long, short)]
    pub out: PathBuf,
    /// Optional SDTF file for the averaged class probabilities.
    #[arg(long)]
    pub probs: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    pub window: usize,
    #[arg(long, default_value_t = 0.75)]
    pub overlap: f64,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of consecutive seeds starting at `--seed`.
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.5, 2.0])]
    pub lambda: Vec<f64>,
    #[arg(long, default_value_t = sdtseg::network::DEFAULT_TOLERANCE)]
    pub tolerance: f64,
    #[arg(long, hide = true)]
    pub corrupt_gradient: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [512usize, 1024, 2048])]
    pub sizes: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// Applies the thread cap from the environment.
pub fn init_threads() -> Result<(), Failure> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .map_err(|_| Failure::Input(anyhow::anyhow!("{THREADS_ENV}={value:?} is not a thread count")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(anyhow::Error::from)?;
    Ok(())
}

pub fn run(cli: Cli) -> Result<(), Failure> {
    init_threads()?;
    match cli.command {
        Command::Sdt(a) => commands::sdt(&a),
        Command::Train { config } => commands::train(&RunConfig::load(&config)?),
        Command::Eval(a) => commands::eval(&a),
        Command::Infer(a) => commands::infer(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
        Command::Bench(a) => commands::bench(&a),
        Command::Synth { config } => commands::synth(&RunConfig::load(&config)?),
    }
}
