//! Command-line front end: configuration, stream ingestion, subcommands and
//! report emission.

pub mod commands;
pub mod config;
pub mod ingest;
pub mod report;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use crate::ingest::StreamFormat;
use crate::report::EmitFormat;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_SUITE_FAILURE: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Input {
        path: String,
        #[source]
        source: ingest::IngestError,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Io { .. } | CliError::Input { .. } => EXIT_IO,
        }
    }

    pub(crate) fn validation(e: impl std::fmt::Display) -> Self {
        CliError::Validation(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "jointstat",
    version,
    about = "Joint limit laws of randomness-test statistics"
)]
pub struct Cli {
    /// Battery configuration (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Report destination; standard output when absent.
    #[arg(long, global = true)]
    pub output: Option<PathBuf>,
    #[arg(long, global = true, default_value = "json_doc")]
    pub emit: EmitFormat,
    /// Worker threads (results do not depend on this).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Evaluate the battery on a stream.
    Eval(EvalArgs),
    /// Sample the joint limit law.
    Limit(LimitArgs),
    /// Monte-Carlo run of the battery under a generator.
    Mc(McArgs),
    /// Asymptotic independence of groups of statistics.
    Indep(IndepArgs),
    /// Export Phi* and G*.
    Covariance(CovarianceArgs),
    /// Divergence or convergence study across sample sizes.
    Probe(ProbeArgs),
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value = "bits_packed")]
    pub format: StreamFormat,
    /// Number of packed bits to read; the remaining tail bits are ignored.
    #[arg(long)]
    pub length: Option<usize>,
}

#[derive(Debug, Args)]
pub struct LimitArgs {
    #[arg(long, default_value_t = 20_000)]
    pub draws: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Include every draw in the report.
    #[arg(long)]
    pub keep_draws: bool,
}

#[derive(Debug, Args)]
pub struct McArgs {
    #[arg(long, default_value_t = 2000)]
    pub replicas: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Generator as JSON, e.g. `{"kind":"bernoulli","p":0.75}`; H0 by default.
    #[arg(long)]
    pub generator: Option<String>,
    /// Exit with status 3 when goodness-of-fit failures exceed the budget.
    #[arg(long)]
    pub assert: bool,
    #[arg(long, default_value_t = 0.001)]
    pub alpha: f64,
    /// Compare against this many limit draws (0 disables).
    #[arg(long, default_value_t = 0)]
    pub limit_draws: usize,
    #[arg(long, default_value_t = 1)]
    pub limit_seed: u64,
    #[arg(long)]
    pub keep_replicas: bool,
}

#[derive(Debug, Args)]
pub struct IndepArgs {
    /// Groups separated by `;`, members by `,`, e.g. `sum[1];sum[2],lb[2]`.
    /// One group per triple when absent.
    #[arg(long)]
    pub groups: Option<String>,
    /// Absolute tolerance on `|G*_uv|`.
    #[arg(long)]
    pub tol: Option<f64>,
}

#[derive(Debug, Args)]
pub struct CovarianceArgs {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ProbeMode {
    Divergence,
    Convergence,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[arg(long, value_enum, default_value = "divergence")]
    pub mode: ProbeMode,
    /// Comma-separated sample sizes.
    #[arg(long, value_delimiter = ',', required = true)]
    pub grid: Vec<usize>,
    #[arg(long, default_value_t = 2000)]
    pub replicas: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub generator: Option<String>,
    /// Limit draws for quadratic statistics in convergence mode.
    #[arg(long, default_value_t = 20_000)]
    pub limit_draws: usize,
}

/// Result of one invocation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outcome {
    pub code: i32,
    pub stdout: Vec<u8>,
    pub stderr: String,
}

/// Parses `argv` (including the program name), runs the subcommand and
/// writes the report to `--output` or into [`Outcome::stdout`].
pub fn run_command<I, T>(argv: I) -> Outcome
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() {
                EXIT_VALIDATION
            } else {
                EXIT_OK
            };
            let text = e.render().to_string();
            return if code == EXIT_OK {
                Outcome {
                    code,
                    stdout: text.into_bytes(),
                    stderr: String::new(),
                }
            } else {
                Outcome {
                    code,
                    stdout: Vec::new(),
                    stderr: text,
                }
            };
        }
    };
    match execute(&cli) {
        Ok(outcome) => outcome,
        Err(e) => Outcome {
            code: e.exit_code(),
            stdout: Vec::new(),
            stderr: format!("error: {e}\n"),
        },
    }
}

fn execute(cli: &Cli) -> Result<Outcome, CliError> {
    let run = || commands::dispatch(cli);
    let (report, code) = match cli.workers {
        Some(0) => return Err(CliError::Validation("--workers must be positive".into())),
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build()
            .map_err(CliError::validation)?
            .install(run)?,
        None => run()?,
    };
    let text = report.emit(cli.emit);
    let mut stderr = String::new();
    if code == EXIT_SUITE_FAILURE {
        stderr.push_str("suite failure: goodness-of-fit failures exceed the budget\n");
    }
    match &cli.output {
        Some(path) => {
            std::fs::write(path, text).map_err(|source| CliError::Io {
                path: path.display().to_string(),
                source,
            })?;
            Ok(Outcome {
                code,
                stdout: Vec::new(),
                stderr,
            })
        }
        None => Ok(Outcome {
            code,
            stdout: text.into_bytes(),
            stderr,
        }),
    }
}
