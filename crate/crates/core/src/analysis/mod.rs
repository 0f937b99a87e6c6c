//! Offline analysis of measurement records: power models, normalization and
//! confound checks.
//!
//! Everything here works on [`Observation`]s, which can be built from JSON
//! line records or from exported CSV rows.

mod confounds;
mod model;
mod normalize;
mod regression;
mod report;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::counter::Domain;
use crate::harness::{CsvRow, MeasurementRecord};

pub use confounds::{detect_confounds, ConfoundConfig, ConfoundFlag, ConfoundReport, FlagKind, FlagStatus, WarmupSkew};
pub use model::{
    breakeven_throughput_gain, fit_linear_memory, fit_log_cores, power_doubling_increment, predict_power, ModelKind,
    PowerModel, Prediction, WorkloadDescriptor,
};
pub use normalize::{normalize, EnergyChoice, MeanKind, NormalizeOptions, NormalizedRow, NormalizedTable};
pub use regression::{least_squares, LinearFit};
pub use report::{fit_report, scatter_svg};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("degenerate fit: {0}")]
    Degenerate(String),
    #[error("average active cores must be positive, got {0}")]
    NonPositiveCores(f64),
    #[error("model power must be positive, got {0} W")]
    NonPositivePower(f64),
    #[error("expected a {expected:?} model, got {found:?}")]
    WrongModelKind { expected: ModelKind, found: ModelKind },
    #[error("baseline implementation {0:?} has no successful runs")]
    MissingBaseline(String),
}

/// One measured run, reduced to what the analyses need.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub benchmark: String,
    pub language_impl: String,
    pub repetition: u32,
    /// In-process iterations; unknown for CSV input.
    pub iterations: Option<u32>,
    pub wall_time_s: Option<f64>,
    pub pkg_joules: Option<f64>,
    pub dram_joules: Option<f64>,
    pub pkg_watts: Option<f64>,
    pub dram_watts: Option<f64>,
    pub avg_cores: Option<f64>,
    pub llc_misses: Option<u64>,
    pub task_clock_ns: Option<u64>,
    pub exit_status: Option<i32>,
    pub success: bool,
    /// Pinned to one core under a controlled frequency; unknown for CSV.
    pub power_controlled: Option<bool>,
}

impl Observation {
    /// LLC misses per second.
    pub fn memory_activity(&self) -> Option<f64> {
        let wall = self.wall_time_s.filter(|w| *w > 0.0)?;
        Some(self.llc_misses? as f64 / wall)
    }

    pub fn joules(&self, domain: Domain) -> Option<f64> {
        match domain {
            Domain::Pkg => self.pkg_joules,
            Domain::Dram => self.dram_joules,
        }
    }

    pub fn watts(&self, domain: Domain) -> Option<f64> {
        match domain {
            Domain::Pkg => self.pkg_watts,
            Domain::Dram => self.dram_watts,
        }
    }

    /// A short tag naming this run in flags and notes.
    pub fn label(&self) -> String {
        match self.iterations {
            Some(n) => format!("{}/{}#{} (n={n})", self.benchmark, self.language_impl, self.repetition),
            None => format!("{}/{}#{}", self.benchmark, self.language_impl, self.repetition),
        }
    }
}

impl From<&MeasurementRecord> for Observation {
    fn from(r: &MeasurementRecord) -> Self {
        Observation {
            benchmark: r.benchmark.clone(),
            language_impl: r.language_impl.clone(),
            repetition: r.repetition,
            iterations: Some(r.in_process_iterations),
            wall_time_s: r.wall_time_s,
            pkg_joules: r.energy.pkg_joules,
            dram_joules: r.energy.dram_joules,
            pkg_watts: r.avg_power.pkg_watts,
            dram_watts: r.avg_power.dram_watts,
            avg_cores: r.usage.map(|u| u.avg_active_cores),
            llc_misses: r.perf.and_then(|p| p.llc_misses),
            task_clock_ns: r.perf.map(|p| p.task_clock_ns),
            exit_status: r.exit_status,
            success: r.is_success(),
            power_controlled: Some(r.is_power_controlled()),
        }
    }
}

impl From<&CsvRow> for Observation {
    fn from(r: &CsvRow) -> Self {
        Observation {
            benchmark: r.benchmark.clone(),
            language_impl: r.language_impl.clone(),
            repetition: r.repetition,
            iterations: None,
            wall_time_s: r.wall_time_s,
            pkg_joules: r.pkg_joules,
            dram_joules: r.dram_joules,
            pkg_watts: r.pkg_watts,
            dram_watts: r.dram_watts,
            avg_cores: r.avg_cores,
            llc_misses: r.llc_misses,
            task_clock_ns: r.task_clock_ns,
            exit_status: r.exit_status,
            success: r.exit_status == Some(0) && r.wall_time_s.is_some(),
            power_controlled: None,
        }
    }
}

/// `(avg_cores, pkg_watts)` pairs of the successful observations.
pub fn core_power_points(obs: &[Observation]) -> Vec<(f64, f64)> {
    obs.iter().filter(|o| o.success).filter_map(|o| Some((o.avg_cores?, o.pkg_watts?))).collect()
}

/// `(misses_per_s, dram_watts)` pairs of the successful observations.
pub fn memory_power_points(obs: &[Observation]) -> Vec<(f64, f64)> {
    obs.iter().filter(|o| o.success).filter_map(|o| Some((o.memory_activity()?, o.dram_watts?))).collect()
}
