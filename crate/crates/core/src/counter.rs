//! Exact arithmetic for RAPL energy-status counters.
//!
//! The hardware exposes a free-running 32-bit tick counter per power domain
//! inside a 64-bit register. Three rules keep the accounting correct:
//!
//! * only the low 32 bits of the register are meaningful ([`mask_register`]),
//! * consecutive readings are subtracted modulo 2^32 ([`tick_delta`]),
//! * ticks are summed as integers and converted to joules once, at the end
//!   ([`accumulate`]).

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Number of distinct values of the 32-bit energy-status counter.
pub const COUNTER_MODULUS: u64 = 1 << 32;

/// A RAPL power domain that carries an energy-status counter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    /// Whole processor package.
    Pkg,
    /// Memory attached to the package.
    Dram,
}

impl Domain {
    pub const ALL: [Domain; 2] = [Domain::Pkg, Domain::Dram];

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Pkg => "pkg",
            Domain::Dram => "dram",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Domain {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "pkg" | "package" => Ok(Domain::Pkg),
            "dram" => Ok(Domain::Dram),
            other => Err(format!("unknown RAPL domain `{other}` (expected pkg or dram)")),
        }
    }
}

/// One (domain, package) counter stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StreamId {
    pub domain: Domain,
    pub package: u32,
}

impl StreamId {
    pub const fn new(domain: Domain, package: u32) -> Self {
        StreamId { domain, package }
    }
}

impl fmt::Display for StreamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.domain, self.package)
    }
}

/// The low 32 bits of an energy-status register.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RawCounterValue(u32);

impl RawCounterValue {
    pub const fn new(value: u32) -> Self {
        RawCounterValue(value)
    }

    pub const fn get(self) -> u32 {
        self.0
    }
}

impl From<u32> for RawCounterValue {
    fn from(v: u32) -> Self {
        RawCounterValue(v)
    }
}

/// Keep only the counter bits of a raw register read. The upper 32 bits are
/// reserved.
pub const fn mask_register(raw_register: u64) -> RawCounterValue {
    RawCounterValue(raw_register as u32)
}

/// Ticks elapsed between two consecutive readings of the same stream,
/// assuming at most one wraparound in between.
pub const fn tick_delta(prev: RawCounterValue, curr: RawCounterValue) -> u64 {
    curr.0.wrapping_sub(prev.0) as u64
}

/// Where the energy-status-unit field sits inside the power-unit register.
///
/// Defaults to bits 12:8, the layout documented for Intel parts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitField {
    pub offset: u32,
    pub width: u32,
}

impl Default for UnitField {
    fn default() -> Self {
        UnitField { offset: 8, width: 5 }
    }
}

impl UnitField {
    pub fn extract(&self, register: u64) -> u64 {
        if self.width == 0 {
            return 0;
        }
        let mask = if self.width >= 64 { u64::MAX } else { (1u64 << self.width) - 1 };
        register.checked_shr(self.offset).unwrap_or(0) & mask
    }

    /// Power-unit register value that encodes `exponent` under this layout.
    pub fn encode(&self, exponent: u32) -> u64 {
        (exponent as u64) << self.offset
    }
}

/// Energy represented by one counter tick, `2^-exponent` joules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub struct EnergyUnit {
    exponent: u32,
}

impl EnergyUnit {
    /// Smallest accepted exponent; `2^-0` would be a full joule per tick.
    pub const MIN_EXPONENT: u32 = 1;
    /// Largest accepted exponent; `2^-31` J per tick and below is rejected.
    pub const MAX_EXPONENT: u32 = 30;

    pub fn from_exponent(exponent: u32) -> Result<Self, CounterError> {
        if (Self::MIN_EXPONENT..=Self::MAX_EXPONENT).contains(&exponent) {
            Ok(EnergyUnit { exponent })
        } else {
            Err(CounterError::ImplausibleUnit { exponent })
        }
    }

    /// The raw unit field `E`.
    pub fn exponent(self) -> u32 {
        self.exponent
    }

    pub fn joules_per_tick(self) -> f64 {
        // Exact: every power of two in this range is representable.
        (-(self.exponent as i32) as f64).exp2()
    }

    /// Ticks per joule, `2^E`, as an exact integer.
    pub fn ticks_per_joule(self) -> u64 {
        1u64 << self.exponent
    }

    pub fn to_joules(self, ticks: u64) -> f64 {
        ticks as f64 * self.joules_per_tick()
    }
}

impl TryFrom<u32> for EnergyUnit {
    type Error = CounterError;

    fn try_from(exponent: u32) -> Result<Self, Self::Error> {
        EnergyUnit::from_exponent(exponent)
    }
}

impl From<EnergyUnit> for u32 {
    fn from(unit: EnergyUnit) -> u32 {
        unit.exponent
    }
}

/// Decode the energy-status unit from a power-unit register value.
pub fn decode_unit(raw_power_unit_register: u64, field: UnitField) -> Result<EnergyUnit, CounterError> {
    let exponent = field.extract(raw_power_unit_register);
    let exponent = u32::try_from(exponent).map_err(|_| CounterError::ImplausibleUnit { exponent: u32::MAX })?;
    EnergyUnit::from_exponent(exponent)
}

/// One timestamped counter reading.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnergySample {
    /// Monotonic nanoseconds since session start.
    pub timestamp_ns: u64,
    pub stream: StreamId,
    pub raw: RawCounterValue,
}

impl EnergySample {
    pub fn new(timestamp_ns: u64, stream: StreamId, raw: RawCounterValue) -> Self {
        EnergySample { timestamp_ns, stream, raw }
    }
}

/// Accumulated energy for a stream or for a whole domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyTotal {
    pub domain: Domain,
    pub ticks: u64,
    pub joules: f64,
    /// Number of observed 32-bit wraparounds.
    pub wraparounds: u64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CounterError {
    #[error(
        "energy-status unit exponent {exponent} is implausible (expected {}..={})",
        EnergyUnit::MIN_EXPONENT,
        EnergyUnit::MAX_EXPONENT
    )]
    ImplausibleUnit { exponent: u32 },
    #[error("stream {stream} has {count} sample(s); at least 2 are required")]
    TooFewSamples { stream: StreamId, count: usize },
    #[error("stream {stream}: timestamp {curr_ns} ns does not follow {prev_ns} ns")]
    NonIncreasingTimestamp { stream: StreamId, prev_ns: u64, curr_ns: u64 },
    #[error("stream {stream}: tick total overflowed 64 bits")]
    TickOverflow { stream: StreamId },
}

/// Running integer total for one stream. Feeding readings one at a time
/// gives the same result as [`accumulate`] over the full list.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamAccumulator {
    stream: StreamId,
    first: Option<(u64, RawCounterValue)>,
    last: Option<(u64, RawCounterValue)>,
    ticks: u64,
    wraparounds: u64,
    samples: usize,
}

impl StreamAccumulator {
    pub fn new(stream: StreamId) -> Self {
        StreamAccumulator { stream, first: None, last: None, ticks: 0, wraparounds: 0, samples: 0 }
    }

    pub fn push(&mut self, timestamp_ns: u64, raw: RawCounterValue) -> Result<(), CounterError> {
        if let Some((prev_ts, prev_raw)) = self.last {
            if timestamp_ns <= prev_ts {
                return Err(CounterError::NonIncreasingTimestamp {
                    stream: self.stream,
                    prev_ns: prev_ts,
                    curr_ns: timestamp_ns,
                });
            }
            if raw < prev_raw {
                self.wraparounds += 1;
            }
            self.ticks = self
                .ticks
                .checked_add(tick_delta(prev_raw, raw))
                .ok_or(CounterError::TickOverflow { stream: self.stream })?;
        } else {
            self.first = Some((timestamp_ns, raw));
        }
        self.last = Some((timestamp_ns, raw));
        self.samples += 1;
        Ok(())
    }

    /// Append a later accumulator whose first reading is this one's last.
    pub fn merge(&mut self, later: &StreamAccumulator) -> Result<(), CounterError> {
        match (self.last, later.first) {
            (_, None) => Ok(()),
            (None, Some(_)) => {
                *self = *later;
                Ok(())
            }
            (Some(last), Some(first)) => {
                if last != first {
                    // Bridge the gap between the chunks with one extra delta.
                    self.push(first.0, first.1)?;
                }
                self.ticks =
                    self.ticks.checked_add(later.ticks).ok_or(CounterError::TickOverflow { stream: self.stream })?;
                self.wraparounds += later.wraparounds;
                self.samples += later.samples - 1;
                self.last = later.last;
                Ok(())
            }
        }
    }

    pub fn ticks(&self) -> u64 {
        self.ticks
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    pub fn finish(&self, unit: EnergyUnit) -> Result<EnergyTotal, CounterError> {
        if self.samples < 2 {
            return Err(CounterError::TooFewSamples { stream: self.stream, count: self.samples });
        }
        Ok(EnergyTotal {
            domain: self.stream.domain,
            ticks: self.ticks,
            joules: unit.to_joules(self.ticks),
            wraparounds: self.wraparounds,
        })
    }
}

/// Per-stream and per-domain energy totals for one measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyAccount {
    pub streams: BTreeMap<StreamId, EnergyTotal>,
    /// Sum over packages, per domain. Domains are never summed together.
    pub domains: BTreeMap<Domain, EnergyTotal>,
}

impl EnergyAccount {
    pub fn joules(&self, domain: Domain) -> Option<f64> {
        self.domains.get(&domain).map(|t| t.joules)
    }
}

/// Sum tick deltas over each stream in `samples` and convert to joules.
///
/// Samples of different streams may be interleaved; within a stream they
/// must be in timestamp order.
pub fn accumulate(samples: &[EnergySample], unit: EnergyUnit) -> Result<EnergyAccount, CounterError> {
    accumulate_with_units(samples, |_| unit)
}

/// Like [`accumulate`], with a unit chosen per domain (some server parts use
/// a fixed DRAM unit that differs from the package unit).
pub fn accumulate_with_units(
    samples: &[EnergySample],
    unit_for: impl Fn(Domain) -> EnergyUnit,
) -> Result<EnergyAccount, CounterError> {
    let mut accumulators: BTreeMap<StreamId, StreamAccumulator> = BTreeMap::new();
    for sample in samples {
        accumulators
            .entry(sample.stream)
            .or_insert_with(|| StreamAccumulator::new(sample.stream))
            .push(sample.timestamp_ns, sample.raw)?;
    }

    let mut streams = BTreeMap::new();
    let mut domain_ticks: BTreeMap<Domain, (u64, u64)> = BTreeMap::new();
    for (id, acc) in &accumulators {
        let total = acc.finish(unit_for(id.domain))?;
        let entry = domain_ticks.entry(id.domain).or_default();
        entry.0 = entry.0.checked_add(total.ticks).ok_or(CounterError::TickOverflow { stream: *id })?;
        entry.1 += total.wraparounds;
        streams.insert(*id, total);
    }

    let domains = domain_ticks
        .into_iter()
        .map(|(domain, (ticks, wraparounds))| {
            let joules = unit_for(domain).to_joules(ticks);
            (domain, EnergyTotal { domain, ticks, joules, wraparounds })
        })
        .collect();

    Ok(EnergyAccount { streams, domains })
}
