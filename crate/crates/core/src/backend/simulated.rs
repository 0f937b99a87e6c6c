//! A deterministic machine model: each stream follows a piecewise-constant
//! power schedule and its counter holds the integrated energy in ticks.

use std::collections::BTreeSet;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::counter::{Domain, EnergyUnit, StreamId, UnitField};

use super::{BackendError, CounterAddress, CounterBackend, Register};

pub const TRAJECTORY_FORMAT: &str = "joulemeter-trajectory/1";

// Keep the per-nanosecond tick rate far inside f64's exact-integer range.
const MAX_TICKS_PER_SECOND: f64 = (1u64 << 52) as f64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerSegment {
    /// Session time at which this power level begins, in seconds.
    pub start_s: f64,
    pub watts: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamTrajectory {
    pub domain: Domain,
    #[serde(default)]
    pub package: u32,
    /// Counter value at session time zero, before masking.
    #[serde(default)]
    pub initial_ticks: u64,
    pub segments: Vec<PowerSegment>,
}

/// Workload model used when the harness runs against a simulated machine:
/// how long the run takes in virtual time and what perf counters it shows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatedRun {
    /// Benchmark name, or `*` to match any.
    pub benchmark: String,
    #[serde(default)]
    pub language_impl: Option<String>,
    /// Steady-state seconds per in-process iteration.
    pub iteration_s: f64,
    /// Seconds for the first iteration when it differs from steady state.
    #[serde(default)]
    pub first_iteration_s: Option<f64>,
    #[serde(default = "one")]
    pub avg_active_cores: f64,
    #[serde(default)]
    pub llc_misses_per_s: f64,
    #[serde(default)]
    pub llc_references_per_s: Option<f64>,
}

fn one() -> f64 {
    1.0
}

impl SimulatedRun {
    /// Virtual wall time of a run performing `iterations` in-process iterations.
    pub fn duration_s(&self, iterations: u32) -> f64 {
        let n = iterations.max(1) as f64;
        let first = self.first_iteration_s.unwrap_or(self.iteration_s);
        first + (n - 1.0) * self.iteration_s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub format: String,
    pub unit_exponent: u32,
    #[serde(default)]
    pub unit_field: UnitField,
    /// Each read returns the counter as it stands this long after the
    /// requested time.
    #[serde(default)]
    pub read_latency_ns: u64,
    pub streams: Vec<StreamTrajectory>,
    #[serde(default)]
    pub runs: Vec<SimulatedRun>,
}

impl Trajectory {
    pub fn new(unit_exponent: u32) -> Self {
        Trajectory {
            format: TRAJECTORY_FORMAT.to_string(),
            unit_exponent,
            unit_field: UnitField::default(),
            read_latency_ns: 0,
            streams: Vec::new(),
            runs: Vec::new(),
        }
    }

    /// Add a stream drawing `watts` for the whole session.
    pub fn constant(mut self, domain: Domain, package: u32, watts: f64) -> Self {
        self.streams.push(StreamTrajectory {
            domain,
            package,
            initial_ticks: 0,
            segments: vec![PowerSegment { start_s: 0.0, watts }],
        });
        self
    }

    pub fn with_stream(mut self, stream: StreamTrajectory) -> Self {
        self.streams.push(stream);
        self
    }

    pub fn with_run(mut self, run: SimulatedRun) -> Self {
        self.runs.push(run);
        self
    }

    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| BackendError::Io { path: path.to_path_buf(), source: e })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, BackendError> {
        let trajectory: Trajectory = toml::from_str(text).map_err(|e| BackendError::Trajectory(e.to_string()))?;
        trajectory.validate()?;
        Ok(trajectory)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("trajectory serializes")
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        let bad = |msg: String| Err(BackendError::Trajectory(msg));
        if self.format != TRAJECTORY_FORMAT {
            return bad(format!("format tag `{}` (expected `{TRAJECTORY_FORMAT}`)", self.format));
        }
        let unit = EnergyUnit::from_exponent(self.unit_exponent)?;
        let mut seen = BTreeSet::new();
        for stream in &self.streams {
            let id = StreamId::new(stream.domain, stream.package);
            if !seen.insert(id) {
                return bad(format!("stream {id} declared twice"));
            }
            let Some(first) = stream.segments.first() else {
                return bad(format!("stream {id} has no power segments"));
            };
            if first.start_s != 0.0 {
                return bad(format!("stream {id}: first segment must start at 0 s"));
            }
            for pair in stream.segments.windows(2) {
                if !(pair[1].start_s > pair[0].start_s) {
                    return bad(format!("stream {id}: segment starts must be strictly increasing"));
                }
            }
            for seg in &stream.segments {
                if !seg.start_s.is_finite() || !seg.watts.is_finite() || seg.watts < 0.0 {
                    return bad(format!("stream {id}: segment {seg:?} needs finite start and non-negative watts"));
                }
                if seg.watts * unit.ticks_per_joule() as f64 > MAX_TICKS_PER_SECOND {
                    return bad(format!(
                        "stream {id}: {} W is not representable at 2^-{} J/tick",
                        seg.watts, self.unit_exponent
                    ));
                }
            }
        }
        if !seen.iter().any(|s| s.domain == Domain::Pkg) {
            return bad("no pkg stream declared".into());
        }
        for run in &self.runs {
            let ok = run.iteration_s > 0.0
                && run.first_iteration_s.is_none_or(|f| f > 0.0)
                && run.avg_active_cores > 0.0
                && run.llc_misses_per_s >= 0.0;
            if !ok {
                return bad(format!("run model for `{}` needs positive times and cores", run.benchmark));
            }
        }
        Ok(())
    }

    /// Most specific run model for a benchmark: exact implementation match,
    /// then benchmark-only, then the `*` wildcard.
    pub fn run_for(&self, benchmark: &str, language_impl: &str) -> Option<&SimulatedRun> {
        let matches_name = |r: &&SimulatedRun| r.benchmark == benchmark;
        self.runs
            .iter()
            .filter(matches_name)
            .find(|r| r.language_impl.as_deref() == Some(language_impl))
            .or_else(|| self.runs.iter().filter(matches_name).find(|r| r.language_impl.is_none()))
            .or_else(|| self.runs.iter().find(|r| r.benchmark == "*"))
    }
}

struct CompiledStream {
    id: StreamId,
    initial_ticks: u64,
    // (start ns, ticks per ns scaled by 1e9, i.e. watts * 2^E)
    segments: Vec<(u64, f64)>,
}

impl CompiledStream {
    fn counter_at(&self, t_ns: u64) -> u64 {
        let mut scaled = 0.0f64;
        for (i, &(start, rate)) in self.segments.iter().enumerate() {
            if t_ns <= start {
                break;
            }
            let end = self.segments.get(i + 1).map_or(t_ns, |s| s.0.min(t_ns));
            scaled += rate * (end - start) as f64;
        }
        self.initial_ticks.wrapping_add((scaled / 1e9).floor() as u64)
    }
}

pub struct SimulatedBackend {
    trajectory: Trajectory,
    unit: EnergyUnit,
    streams: Vec<CompiledStream>,
    topology: Vec<StreamId>,
}

impl SimulatedBackend {
    pub fn new(trajectory: Trajectory) -> Result<Self, BackendError> {
        trajectory.validate()?;
        let unit = EnergyUnit::from_exponent(trajectory.unit_exponent)?;
        let ticks_per_joule = unit.ticks_per_joule() as f64;
        let mut streams: Vec<CompiledStream> = trajectory
            .streams
            .iter()
            .map(|s| CompiledStream {
                id: StreamId::new(s.domain, s.package),
                initial_ticks: s.initial_ticks,
                segments: s
                    .segments
                    .iter()
                    .map(|seg| ((seg.start_s * 1e9).round() as u64, seg.watts * ticks_per_joule))
                    .collect(),
            })
            .collect();
        streams.sort_by_key(|s| s.id);
        let topology = streams.iter().map(|s| s.id).collect();
        Ok(SimulatedBackend { trajectory, unit, streams, topology })
    }

    pub fn unit(&self) -> EnergyUnit {
        self.unit
    }

    /// Unmasked 64-bit counter for `stream` at session time `at`.
    pub fn ground_truth(&self, stream: StreamId, at: Duration) -> Option<u64> {
        self.streams.iter().find(|s| s.id == stream).map(|s| s.counter_at(at.as_nanos() as u64))
    }
}

impl CounterBackend for SimulatedBackend {
    fn name(&self) -> &'static str {
        "simulated"
    }

    fn topology(&self) -> &[StreamId] {
        &self.topology
    }

    fn read(&mut self, address: CounterAddress, at: Duration) -> Result<u64, BackendError> {
        match address.register {
            Register::PowerUnit => Ok(self.trajectory.unit_field.encode(self.unit.exponent())),
            Register::Energy(domain) => {
                let id = StreamId::new(domain, address.package);
                let at = at + Duration::from_nanos(self.trajectory.read_latency_ns);
                self.ground_truth(id, at).ok_or(BackendError::CapabilityMissing { domain, package: address.package })
            }
        }
    }

    fn unit_field(&self) -> UnitField {
        self.trajectory.unit_field
    }

    fn simulation(&self) -> Option<&Trajectory> {
        Some(&self.trajectory)
    }
}
