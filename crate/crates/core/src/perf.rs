//! Task-clock and last-level-cache counters for a process tree.
//!
//! Counters are 64 bits wide, so they are read once when the workload ends.
//! Average active cores is task-clock nanoseconds over wall-clock
//! nanoseconds; memory activity is LLC misses per second.

use std::io;

use log::warn;
use perf_event::events::{Cache, CacheId, CacheOp, CacheResult, Hardware, Raw, Software};
use perf_event::{Builder, Counter};
use serde::{Deserialize, Serialize};
use thiserror::Error;

const PRIVILEGE_HINT: &str =
    "perf_event_open was refused; run as root, grant CAP_PERFMON, or lower /proc/sys/kernel/perf_event_paranoid";

#[derive(Debug, Error)]
pub enum PerfError {
    #[error("{PRIVILEGE_HINT} ({source})")]
    Permission { source: io::Error },
    #[error("cannot open {event} counter: {source}")]
    Open { event: &'static str, source: io::Error },
    #[error("cannot read {event} counter: {source}")]
    Read { event: &'static str, source: io::Error },
    #[error("wall time must be positive")]
    ZeroWallTime,
}

/// Raw counts over one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PerfCounters {
    /// CPU time summed over every core, in nanoseconds.
    pub task_clock_ns: u64,
    pub llc_misses: Option<u64>,
    pub llc_references: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UsageSummary {
    pub avg_active_cores: f64,
    /// LLC misses per second.
    pub memory_activity: Option<f64>,
}

impl UsageSummary {
    pub fn from_counters(counters: &PerfCounters, wall_time_ns: u64) -> Result<Self, PerfError> {
        let avg_active_cores = average_active_cores(counters.task_clock_ns, wall_time_ns)?;
        let wall_time_s = wall_time_ns as f64 / 1e9;
        let memory_activity = counters.llc_misses.map(|m| memory_activity(m, wall_time_s)).transpose()?;
        Ok(UsageSummary { avg_active_cores, memory_activity })
    }
}

pub fn average_active_cores(task_clock_ns: u64, wall_time_ns: u64) -> Result<f64, PerfError> {
    if wall_time_ns == 0 {
        return Err(PerfError::ZeroWallTime);
    }
    Ok(task_clock_ns as f64 / wall_time_ns as f64)
}

pub fn memory_activity(llc_misses: u64, wall_time_s: f64) -> Result<f64, PerfError> {
    if !(wall_time_s > 0.0) {
        return Err(PerfError::ZeroWallTime);
    }
    Ok(llc_misses as f64 / wall_time_s)
}

/// Which hardware event stands for "LLC miss".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum LlcEvent {
    /// The generic `cache-misses` / `cache-references` hardware events.
    #[default]
    Generic,
    /// Last-level cache read misses and accesses (`LLC-load-misses`).
    LastLevelRead,
    /// Microarchitecture-specific raw event codes.
    Raw { misses: u64, references: Option<u64> },
    /// Do not count LLC events.
    Off,
}

impl LlcEvent {
    fn miss_builder(self) -> Option<Builder<'static>> {
        match self {
            LlcEvent::Generic => Some(Builder::new(Hardware::CACHE_MISSES)),
            LlcEvent::LastLevelRead => {
                Some(Builder::new(Cache { which: CacheId::LL, operation: CacheOp::READ, result: CacheResult::MISS }))
            }
            LlcEvent::Raw { misses, .. } => Some(Builder::new(Raw::new(misses))),
            LlcEvent::Off => None,
        }
    }

    fn reference_builder(self) -> Option<Builder<'static>> {
        match self {
            LlcEvent::Generic => Some(Builder::new(Hardware::CACHE_REFERENCES)),
            LlcEvent::LastLevelRead => {
                Some(Builder::new(Cache { which: CacheId::LL, operation: CacheOp::READ, result: CacheResult::ACCESS }))
            }
            LlcEvent::Raw { references, .. } => references.map(|r| Builder::new(Raw::new(r))),
            LlcEvent::Off => None,
        }
    }
}

/// Which processes a counter group observes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    /// A process and every child it creates afterwards.
    Process(libc::pid_t),
    /// The calling process.
    ThisProcess,
}

/// Counters attached to one target. At most three events are requested,
/// keeping below the usual four general-purpose counter slots.
pub struct CounterGroup {
    task_clock: Counter,
    llc_misses: Option<Counter>,
    llc_references: Option<Counter>,
    warnings: Vec<String>,
}

/// Counts read from a group plus accuracy caveats.
#[derive(Debug, Clone, PartialEq)]
pub struct PerfReading {
    pub counters: PerfCounters,
    /// `time_enabled / time_running` of the most multiplexed event; 1.0 means
    /// the events had a hardware counter for the whole run. Not applied to
    /// the counts.
    pub multiplex_scaling: f64,
    pub warnings: Vec<String>,
}

impl CounterGroup {
    /// Attach to `target`. With `enable_on_exec`, counting starts when the
    /// target next calls exec; otherwise call [`CounterGroup::enable`].
    pub fn attach(target: Target, llc: LlcEvent, enable_on_exec: bool) -> Result<Self, PerfError> {
        let configure = |mut b: Builder<'static>| {
            match target {
                Target::Process(pid) => b.observe_pid(pid),
                Target::ThisProcess => b.observe_self(),
            };
            b.any_cpu().inherit(true).enable_on_exec(enable_on_exec);
            b
        };

        let task_clock =
            open_counter(configure(Builder::new(Software::TASK_CLOCK)), "task-clock").map_err(|e| match e {
                PerfError::Open { source, .. } if is_permission(&source) => PerfError::Permission { source },
                other => other,
            })?;

        let mut warnings = Vec::new();
        let mut optional = |builder: Option<Builder<'static>>, event: &'static str| match builder {
            None => None,
            Some(b) => match open_counter(configure(b), event) {
                Ok(c) => Some(c),
                Err(e) => {
                    warn!("{e}; continuing without it");
                    warnings.push(format!("{event} unavailable: {e}"));
                    None
                }
            },
        };
        let llc_misses = optional(llc.miss_builder(), "llc-misses");
        let llc_references =
            if llc_misses.is_some() { optional(llc.reference_builder(), "llc-references") } else { None };

        Ok(CounterGroup { task_clock, llc_misses, llc_references, warnings })
    }

    pub fn enable(&mut self) -> Result<(), PerfError> {
        let read_err = |event| move |source| PerfError::Read { event, source };
        self.task_clock.enable().map_err(read_err("task-clock"))?;
        if let Some(c) = &mut self.llc_misses {
            c.enable().map_err(read_err("llc-misses"))?;
        }
        if let Some(c) = &mut self.llc_references {
            c.enable().map_err(read_err("llc-references"))?;
        }
        Ok(())
    }

    pub fn has_llc(&self) -> bool {
        self.llc_misses.is_some()
    }

    pub fn read(&mut self) -> Result<PerfReading, PerfError> {
        let mut scaling: f64 = 1.0;
        let mut read = |counter: &mut Counter, event: &'static str| -> Result<u64, PerfError> {
            let data = counter.read_full().map_err(|source| PerfError::Read { event, source })?;
            if let (Some(enabled), Some(running)) = (data.time_enabled(), data.time_running()) {
                if !running.is_zero() && running < enabled {
                    scaling = scaling.max(enabled.as_secs_f64() / running.as_secs_f64());
                }
            }
            Ok(data.count())
        };
        let task_clock_ns = read(&mut self.task_clock, "task-clock")?;
        let llc_misses = self.llc_misses.as_mut().map(|c| read(c, "llc-misses")).transpose()?;
        let llc_references = self.llc_references.as_mut().map(|c| read(c, "llc-references")).transpose()?;

        let mut warnings = self.warnings.clone();
        if scaling > 1.0 {
            warnings.push(format!("counters were multiplexed (scaling {scaling:.3}); counts are unscaled"));
        }
        if let (Some(m), Some(r)) = (llc_misses, llc_references) {
            if m > r {
                warnings.push(format!("llc misses ({m}) exceed references ({r}); event pair may be mismatched"));
            }
        }
        Ok(PerfReading {
            counters: PerfCounters { task_clock_ns, llc_misses, llc_references },
            multiplex_scaling: scaling,
            warnings,
        })
    }
}

fn is_permission(e: &io::Error) -> bool {
    matches!(e.raw_os_error(), Some(libc::EACCES) | Some(libc::EPERM))
}

/// Open with kernel time included, falling back to user time only when
/// the kernel refuses.
fn open_counter(mut builder: Builder<'static>, event: &'static str) -> Result<Counter, PerfError> {
    builder.include_kernel();
    match builder.build() {
        Ok(c) => Ok(c),
        Err(e) if is_permission(&e) => {
            builder.exclude_kernel(true).build().map_err(|source| PerfError::Open { event, source })
        }
        Err(source) => Err(PerfError::Open { event, source }),
    }
}
