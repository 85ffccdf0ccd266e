//! `cfmd`: inference, toy training, gradient checks, scan benchmarks and
//! the property self-test.
//!
//! stdout carries data (CSV, JSON, tables); stderr carries logs. Exit
//! codes: 0 success, 1 failed checks, 2 bad arguments or configuration,
//! 3 file or format errors, 4 shape or contract errors, 5 training
//! divergence.

/// `println!` for data on stdout; a closed pipe ends the process quietly
/// instead of panicking.
macro_rules! out {
    ($($arg:tt)*) => {{
        use std::io::Write as _;
        if let Err(e) = writeln!(std::io::stdout().lock(), $($arg)*) {
            if e.kind() == std::io::ErrorKind::BrokenPipe {
                std::process::exit(0);
            }
            panic!("writing to stdout: {e}");
        }
    }};
}

mod bench;
mod gradcheck;
mod infer;
mod selftest;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use cfmd_core::{DType, Error};
use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "cfmd", version, about = "Cross-layer Mamba aggregation and dynamic upsampling for salient object detection")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Random seed; for train-toy it replaces the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Floating-point type for computation.
    #[arg(long, global = true, value_parser = parse_dtype)]
    pub dtype: Option<DType>,
    /// Worker threads. Kernels run on one thread so that reductions keep a
    /// fixed order; values above 1 are accepted and have no effect.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
    pub threads: u32,
    /// Machine-readable JSON on stdout.
    #[arg(long, global = true)]
    pub json: bool,
}

impl Global {
    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Predict a saliency map for one image.
    Infer(infer::InferArgs),
    /// Train on synthetic shapes and write a checkpoint and metrics.
    TrainToy(train::TrainArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(gradcheck::GradcheckArgs),
    /// Time the sequential and blocked scans.
    ScanBench(bench::BenchArgs),
    /// Run every named property suite at reduced sizes.
    Selftest(selftest::SelftestArgs),
}

fn parse_dtype(s: &str) -> Result<DType, String> {
    match s {
        "f32" => Ok(DType::F32),
        "f64" => Ok(DType::F64),
        other => Err(format!("unknown dtype {other:?} (f32, f64)")),
    }
}

/// A failure with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        Failure {
            code,
            message: message.into(),
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Failure::new(2, message)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) => 2,
            Error::Io { .. } | Error::Format { .. } | Error::UnsupportedDtype(_) => 3,
            Error::Shape(_) | Error::Contract(_) | Error::Size(_) => 4,
            Error::Training { .. } => 5,
            Error::Numeric(_) | Error::Eval(_) | Error::Internal(_) => 1,
        };
        Failure::new(code, e.to_string())
    }
}

pub type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let g = &cli.global;
    let result = match &cli.command {
        Command::Infer(a) => infer::run(g, a),
        Command::TrainToy(a) => train::run(g, a),
        Command::Gradcheck(a) => gradcheck::run(g, a),
        Command::ScanBench(a) => bench::run(g, a),
        Command::Selftest(a) => selftest::run(g, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

/// Writes `text` to `path`, mapping failures to exit code 3.
pub fn write_file(path: &PathBuf, text: &str) -> Outcome {
    std::fs::write(path, text).map_err(|e| Failure::new(3, format!("{}: {e}", path.display())))
}
