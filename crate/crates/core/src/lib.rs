//! Measuring and analysing the energy consumption of programs.
//!
//! * [`counter`]: overflow-safe RAPL tick arithmetic.
//! * [`backend`]: register sources (MSR device files or a simulated machine).
//! * [`sampler`]: periodic sampling sessions.
//! * [`perf`]: task-clock and LLC-miss counters.
//! * [`harness`]: benchmark orchestration and the results formats.
//! * [`analysis`]: power models, normalization and confound checks.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod backend;
pub mod counter;
pub mod harness;
pub mod perf;
pub mod sampler;

pub use analysis::{AnalysisError, ConfoundReport, NormalizedTable, Observation, PowerModel, WorkloadDescriptor};
pub use backend::{BackendError, BackendSpec, CounterBackend, SimulatedBackend, Trajectory};
pub use counter::{
    accumulate, decode_unit, mask_register, tick_delta, Domain, EnergyAccount, EnergySample, EnergyTotal, EnergyUnit,
    RawCounterValue, StreamId, UnitField,
};
pub use harness::{BenchmarkSpec, MeasurementRecord, SuiteConfig};
pub use sampler::{Session, SessionConfig, SessionResult};
