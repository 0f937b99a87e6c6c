//! Counter sources: the machine's model-specific registers, or a
//! deterministic simulated machine driven by a power schedule.

mod msr;
mod simulated;

use std::path::PathBuf;
use std::str::FromStr;
use std::time::Duration;

use thiserror::Error;

use crate::counter::{decode_unit, CounterError, Domain, EnergyUnit, StreamId, UnitField};

pub use msr::{MsrBackend, MsrConfig, MSR_DRAM_ENERGY_STATUS, MSR_PKG_ENERGY_STATUS, MSR_RAPL_POWER_UNIT};
pub use simulated::{PowerSegment, SimulatedBackend, SimulatedRun, StreamTrajectory, Trajectory, TRAJECTORY_FORMAT};

/// Which register of a package to read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Register {
    Energy(Domain),
    PowerUnit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CounterAddress {
    pub register: Register,
    pub package: u32,
}

impl CounterAddress {
    pub fn energy(stream: StreamId) -> Self {
        CounterAddress { register: Register::Energy(stream.domain), package: stream.package }
    }

    pub fn power_unit(package: u32) -> Self {
        CounterAddress { register: Register::PowerUnit, package }
    }
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("permission denied opening {path}: {hint}")]
    PermissionDenied { path: PathBuf, hint: &'static str },
    #[error("{domain} energy counter is not available on package {package}")]
    CapabilityMissing { domain: Domain, package: u32 },
    #[error("unsupported platform: {0}")]
    Unsupported(String),
    #[error("invalid counter address {0:?}")]
    InvalidAddress(CounterAddress),
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid trajectory: {0}")]
    Trajectory(String),
    #[error(transparent)]
    Unit(#[from] CounterError),
}

/// A source of raw 64-bit RAPL register values.
///
/// One instance belongs to one measurement session at a time.
pub trait CounterBackend: Send {
    fn name(&self) -> &'static str;

    /// Streams available on this machine, stable for the backend's lifetime.
    fn topology(&self) -> &[StreamId];

    /// Raw register value at session time `at`. Callers must mask energy
    /// registers to 32 bits; only the simulated backend uses `at`.
    fn read(&mut self, address: CounterAddress, at: Duration) -> Result<u64, BackendError>;

    /// Layout of the energy-unit field in the power-unit register.
    fn unit_field(&self) -> UnitField {
        UnitField::default()
    }

    /// Tick size for `domain`, decoded from the package-0 power-unit register.
    fn energy_unit(&mut self, domain: Domain) -> Result<EnergyUnit, BackendError> {
        let _ = domain;
        let raw = self.read(CounterAddress::power_unit(0), Duration::ZERO)?;
        Ok(decode_unit(raw, self.unit_field())?)
    }

    /// Present when the backend models a machine; runs are then timed on
    /// a virtual clock.
    fn simulation(&self) -> Option<&Trajectory> {
        None
    }
}

/// Backend selected on the command line: `hardware` or
/// `simulated:<trajectory-file>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendSpec {
    Hardware,
    Simulated(PathBuf),
}

impl FromStr for BackendSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "hardware" => Ok(BackendSpec::Hardware),
            _ => match s.strip_prefix("simulated:") {
                Some(path) if !path.is_empty() => Ok(BackendSpec::Simulated(PathBuf::from(path))),
                _ => Err(format!("invalid backend `{s}` (expected `hardware` or `simulated:<trajectory-file>`)")),
            },
        }
    }
}

impl std::fmt::Display for BackendSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BackendSpec::Hardware => f.write_str("hardware"),
            BackendSpec::Simulated(p) => write!(f, "simulated:{}", p.display()),
        }
    }
}

impl BackendSpec {
    pub fn open(&self) -> Result<Box<dyn CounterBackend>, BackendError> {
        match self {
            BackendSpec::Hardware => Ok(Box::new(MsrBackend::open(MsrConfig::default())?)),
            BackendSpec::Simulated(path) => Ok(Box::new(SimulatedBackend::new(Trajectory::load(path)?)?)),
        }
    }
}
