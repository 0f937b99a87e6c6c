//! `joulemeter`: measure the energy of benchmark commands and analyse the
//! results.
//!
//! Exit status: 0 on success, 1 when some runs failed (their failure records
//! are still written), 2 on configuration or usage errors. Errors are
//! printed to stderr as one JSON object per line.

mod commands;
mod input;

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use joulemeter::analysis::{EnergyChoice, MeanKind};
use joulemeter::BackendSpec;

#[derive(Parser, Debug)]
#[command(name = "joulemeter", version, about = "Measure and analyse the energy consumption of programs")]
struct Cli {
    #[command(flatten)]
    global: GlobalOptions,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct GlobalOptions {
    /// Counter source: `hardware` or `simulated:<trajectory-file>`.
    #[arg(long, global = true, env = "JOULEMETER_BACKEND", value_parser = parse_backend)]
    backend: Option<BackendSpec>,
    /// Sampling period, e.g. `1s`, `250ms` or `0.5`.
    #[arg(long, global = true, value_parser = parse_period)]
    period: Option<Duration>,
    /// Output file (record log for `run`, CSV for `export-csv`, report for the analyses).
    #[arg(long, short, global = true)]
    output: Option<PathBuf>,
    /// More log output; repeat for debug.
    #[arg(long, short, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    /// Only print errors.
    #[arg(long, short, global = true, conflicts_with = "verbose")]
    quiet: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run every benchmark of a suite file and append one record per run.
    Run { suite: PathBuf },
    /// Report frequency, turbo and load conditions and probe the backend.
    CheckEnv {
        /// Print the fingerprint as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Convert a record log to CSV.
    ExportCsv { log: PathBuf },
    /// Fit package power against log2 of average active cores.
    FitPower(FitArgs),
    /// Fit DRAM power against LLC misses per second.
    FitMemory(FitArgs),
    /// Time and energy of each implementation relative to a baseline.
    Normalize {
        /// Results as CSV or record log.
        input: PathBuf,
        #[arg(long)]
        baseline: String,
        #[arg(long, value_enum, default_value = "geometric")]
        mean: MeanArg,
        #[arg(long, value_parser = parse_energy, default_value = "pkg")]
        energy: EnergyChoice,
        #[arg(long)]
        json: bool,
    },
    /// Check comparisons for parallelism, warmup and power confounds.
    Confounds {
        /// Results as CSV or record log.
        input: PathBuf,
        /// Treat every record as single-core pinned at a fixed frequency
        /// (CSV input carries no such flag).
        #[arg(long)]
        pinned: bool,
        #[arg(long, default_value_t = 2.0)]
        parallelism_ratio: f64,
        #[arg(long, default_value_t = 0.5)]
        power_band: f64,
        #[arg(long, default_value_t = 1.5)]
        warmup_ratio: f64,
        #[arg(long)]
        json: bool,
    },
    /// Predict power and energy of a workload from power models.
    Predict(PredictArgs),
}

#[derive(Args, Debug)]
struct FitArgs {
    /// Results as CSV or record log.
    input: PathBuf,
    /// Write a scatter plot with the fitted line as SVG.
    #[arg(long)]
    plot: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct PredictArgs {
    /// Average active cores.
    #[arg(long)]
    cores: f64,
    /// LLC misses per second.
    #[arg(long, default_value_t = 0.0)]
    misses: f64,
    /// Duration in seconds.
    #[arg(long)]
    duration: f64,
    /// Package model watts per doubling of cores.
    #[arg(long, default_value_t = 31.0)]
    pkg_slope: f64,
    #[arg(long, default_value_t = 246.0)]
    pkg_intercept: f64,
    /// DRAM model watts per (miss/s).
    #[arg(long, default_value_t = 1.68e-8)]
    dram_slope: f64,
    #[arg(long, default_value_t = 12.0)]
    dram_intercept: f64,
    #[arg(long)]
    json: bool,
}

#[derive(clap::ValueEnum, Debug, Clone, Copy)]
enum MeanArg {
    Geometric,
    Arithmetic,
}

impl From<MeanArg> for MeanKind {
    fn from(m: MeanArg) -> Self {
        match m {
            MeanArg::Geometric => MeanKind::Geometric,
            MeanArg::Arithmetic => MeanKind::Arithmetic,
        }
    }
}

fn parse_backend(s: &str) -> Result<BackendSpec, String> {
    s.parse()
}

fn parse_energy(s: &str) -> Result<EnergyChoice, String> {
    s.parse()
}

fn parse_period(s: &str) -> Result<Duration, String> {
    let s = s.trim();
    let split = s.find(|c: char| c.is_ascii_alphabetic()).unwrap_or(s.len());
    let (number, unit) = s.split_at(split);
    let value: f64 = number.trim().parse().map_err(|_| format!("invalid duration `{s}`"))?;
    let scale = match unit {
        "" | "s" => 1.0,
        "ms" => 1e-3,
        "us" => 1e-6,
        "ns" => 1e-9,
        _ => return Err(format!("unknown duration unit `{unit}` (use s, ms, us or ns)")),
    };
    let secs = value * scale;
    if !(secs > 0.0 && secs.is_finite()) {
        return Err(format!("duration `{s}` must be positive"));
    }
    Ok(Duration::from_secs_f64(secs))
}

/// Failure of a whole command, mapped to an exit status.
#[derive(Debug)]
pub enum CliError {
    /// Bad configuration, usage or input: exit 2.
    Config { kind: &'static str, message: String },
    /// The command ran but some measurements failed: exit 1.
    RunFailures { failed: usize, total: usize },
}

impl CliError {
    pub fn config(kind: &'static str, message: impl ToString) -> Self {
        CliError::Config { kind, message: message.to_string() }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config { .. } => 2,
            CliError::RunFailures { .. } => 1,
        }
    }

    fn to_json(&self) -> serde_json::Value {
        match self {
            CliError::Config { kind, message } => {
                serde_json::json!({ "error": kind, "message": message, "exit_code": self.exit_code() })
            }
            CliError::RunFailures { failed, total } => serde_json::json!({
                "error": "run-failures",
                "message": format!("{failed} of {total} runs failed"),
                "failed": failed,
                "total": total,
                "exit_code": self.exit_code(),
            }),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let err = CliError::config("usage", e.to_string().trim_end());
            eprintln!("{}", err.to_json());
            return ExitCode::from(err.exit_code());
        }
    };

    let level = match (cli.global.quiet, cli.global.verbose) {
        (true, _) => "error",
        (false, 0) => "warn",
        (false, 1) => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).format_timestamp(None).init();

    match commands::dispatch(cli.command, &cli.global) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{}", err.to_json());
            ExitCode::from(err.exit_code())
        }
    }
}
