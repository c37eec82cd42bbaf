//! The `kq` command line: quantize a KQT archive into a KQZ file, recover it,
//! report its bit budget and sweep reconstruction error for one layer.
//!
//! Exit codes: 0 on success, 1 on an internal failure, 2 on a usage or
//! input error.

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use kq_core::scalar::DEFAULT_BITS;
use kq_core::Error;

pub mod commands;
pub mod sweep;

#[derive(Debug, Parser)]
#[command(
    name = "kq",
    version,
    about = "Kernel-level quantization of CNN weights"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Quantize every layer of a KQT archive into a KQZ file
    Quantize(QuantizeArgs),
    /// Rebuild a full-precision KQT archive from a KQZ file
    Recover(RecoverArgs),
    /// Print the layer-wise bit budget of a KQZ file
    Report(ReportArgs),
    /// Reconstruction error of one layer over codebook sizes or bit widths
    Sweep(SweepArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StageArg {
    #[value(name = "K")]
    K,
    #[value(name = "K+C")]
    KPlusC,
}

impl fmt::Display for StageArg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StageArg::K => "K",
            StageArg::KPlusC => "K+C",
        })
    }
}

/// What happens to layers that are not 3×3 convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OtherLayers {
    Scalar,
    Passthrough,
}

impl fmt::Display for OtherLayers {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OtherLayers::Scalar => "scalar",
            OtherLayers::Passthrough => "passthrough",
        })
    }
}

#[derive(Debug, Clone, Args)]
pub struct QuantizeArgs {
    /// KQT archive to quantize
    #[arg(long)]
    pub input: PathBuf,
    /// KQZ file to write
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, value_enum, default_value_t = StageArg::KPlusC)]
    pub stage: StageArg,
    /// Initial codebook size as a fraction of the kernel count
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
    /// Threshold ratio on the accuracy drop at the initial size
    #[arg(long, default_value_t = 0.75)]
    pub r: f64,
    /// Probes per layer in the codebook size search
    #[arg(long, default_value_t = 8)]
    pub max_iter: usize,
    /// Bits per codebook parameter at stage K+C and per weight for scalar layers
    #[arg(long, default_value_t = DEFAULT_BITS)]
    pub bits: u8,
    /// "proxy", or a command that is given a KQT path as its last argument
    /// and prints an accuracy in [0, 1]
    #[arg(long, default_value = "proxy")]
    pub eval: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Clustering threads; 0 uses every core
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// CSV report path
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = OtherLayers::Scalar)]
    pub other_layers: OtherLayers,
}

#[derive(Debug, Clone, Args)]
pub struct RecoverArgs {
    /// KQZ file
    #[arg(long)]
    pub input: PathBuf,
    /// KQT archive to write
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    /// KQZ file
    #[arg(long)]
    pub input: PathBuf,
    /// Also write the rows as CSV to this path ("-" for stdout)
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Codebook bits assumed for the K+C column of stage K layers
    #[arg(long, default_value_t = DEFAULT_BITS)]
    pub bits: u8,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    /// KQT archive
    #[arg(long)]
    pub input: PathBuf,
    /// Layer name
    #[arg(long)]
    pub layer: String,
    /// Kernel codebook sizes, comma separated
    #[arg(long, value_delimiter = ',')]
    pub k_list: Vec<usize>,
    /// Per-parameter bit widths for the scalar baseline, comma separated
    #[arg(long, value_delimiter = ',')]
    pub bit_list: Vec<u8>,
    /// Clustering runs per point; the lowest error is kept
    #[arg(long, default_value_t = 3)]
    pub restarts: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    /// CSV output path; stdout when absent
    #[arg(long)]
    pub output: Option<PathBuf>,
}

/// A failed command, carrying its exit code class.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Internal(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Internal(_) => 1,
        }
    }

    /// An error reading or parsing a user-supplied file.
    pub fn input(path: &std::path::Path, err: Error) -> Self {
        Failure::Usage(format!("{}: {err}", path.display()))
    }
}

impl From<Error> for Failure {
    fn from(err: Error) -> Self {
        match err {
            Error::InvalidArgument(_) | Error::UnknownLayer(_) => Failure::Usage(err.to_string()),
            other => Failure::Internal(other.to_string()),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Internal(m) => f.write_str(m),
        }
    }
}

pub fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Quantize(a) => commands::cmd_quantize(&a),
        Command::Recover(a) => commands::cmd_recover(&a),
        Command::Report(a) => commands::cmd_report(&a),
        Command::Sweep(a) => commands::cmd_sweep(&a),
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Diagnostics go to stderr.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("kq: {f}");
            f.exit_code()
        }
    }
}
