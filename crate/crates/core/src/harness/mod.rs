//! Benchmark orchestration: run each command under controlled conditions
//! while sampling energy and perf counters, and emit one record per run.

mod env;
mod process;
pub(crate) mod record;
mod runner;
mod spec;

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::backend::BackendError;
use crate::sampler::SamplerError;

pub use env::{environment_check, environment_check_at, EnvironmentFingerprint, SystemPaths, TurboState};
pub use process::{resolve_program, spawn_gated, ExitInfo, GatedChild, Launch};
pub use record::{
    parse_log, read_csv, read_log, write_csv, CsvRow, EnergyBreakdown, MeasurementRecord, Outcome, PowerBreakdown,
    RecordLog, StreamEnergy, CSV_COLUMNS, RECORD_FORMAT,
};
pub use runner::{run_suite, STDERR_TAIL_BYTES};
pub use spec::{
    wrap_iterations, BenchmarkSpec, ContainerConfig, IterationHook, PerfSettings, SuiteConfig, DEFAULT_REPETITIONS,
    ITERATIONS_PLACEHOLDER, SUITE_FORMAT,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed data: {0}")]
    Format(String),
}

impl HarnessError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        HarnessError::Io { path: path.to_path_buf(), source }
    }
}
