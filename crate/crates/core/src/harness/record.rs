//! Measurement records, the append-only JSON-lines log and the CSV export.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::counter::{Domain, EnergyAccount};
use crate::perf::{PerfCounters, UsageSummary};

use super::env::EnvironmentFingerprint;
use super::HarnessError;

pub const RECORD_FORMAT: &str = "joulemeter-record/1";

/// CSV export header, in column order.
pub const CSV_COLUMNS: [&str; 12] = [
    "benchmark",
    "language_impl",
    "repetition",
    "wall_time_s",
    "pkg_joules",
    "dram_joules",
    "pkg_watts",
    "dram_watts",
    "avg_cores",
    "llc_misses",
    "task_clock_ns",
    "exit_status",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Outcome {
    Ok,
    CommandNotFound,
    SpawnFailed,
    NonzeroExit,
    DigestMismatch,
    MeasurementFailed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamEnergy {
    pub domain: Domain,
    pub package: u32,
    pub ticks: u64,
    pub joules: f64,
    pub wraparounds: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    pub pkg_joules: Option<f64>,
    pub dram_joules: Option<f64>,
    pub streams: Vec<StreamEnergy>,
}

impl EnergyBreakdown {
    pub fn from_account(account: &EnergyAccount) -> Self {
        EnergyBreakdown {
            pkg_joules: account.joules(Domain::Pkg),
            dram_joules: account.joules(Domain::Dram),
            streams: account
                .streams
                .iter()
                .map(|(id, t)| StreamEnergy {
                    domain: id.domain,
                    package: id.package,
                    ticks: t.ticks,
                    joules: t.joules,
                    wraparounds: t.wraparounds,
                })
                .collect(),
        }
    }

    pub fn joules(&self, domain: Domain) -> Option<f64> {
        match domain {
            Domain::Pkg => self.pkg_joules,
            Domain::Dram => self.dram_joules,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PowerBreakdown {
    pub pkg_watts: Option<f64>,
    pub dram_watts: Option<f64>,
}

impl PowerBreakdown {
    pub fn from_energy(energy: &EnergyBreakdown, wall_time_s: f64) -> Self {
        PowerBreakdown {
            pkg_watts: energy.pkg_joules.map(|j| j / wall_time_s),
            dram_watts: energy.dram_joules.map(|j| j / wall_time_s),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementRecord {
    pub format: String,
    pub benchmark: String,
    pub language_impl: String,
    pub repetition: u32,
    pub in_process_iterations: u32,
    pub cpuset: Option<Vec<usize>>,
    pub backend: String,
    pub outcome: Outcome,
    pub exit_status: Option<i32>,
    pub signal: Option<i32>,
    pub wall_time_s: Option<f64>,
    pub energy: EnergyBreakdown,
    pub avg_power: PowerBreakdown,
    pub perf: Option<PerfCounters>,
    pub usage: Option<UsageSummary>,
    /// `perf`, `rusage`, `simulated` or absent.
    pub task_clock_source: Option<String>,
    /// Wall-clock start, milliseconds since the Unix epoch.
    pub started_unix_ms: u64,
    pub environment: EnvironmentFingerprint,
    pub error: Option<String>,
    pub stderr_tail: Option<String>,
    pub warnings: Vec<String>,
}

impl MeasurementRecord {
    pub fn is_success(&self) -> bool {
        self.outcome == Outcome::Ok
    }

    /// Single-core pinned and measured under a controlled frequency setup.
    pub fn is_power_controlled(&self) -> bool {
        self.cpuset.as_ref().is_some_and(|c| c.len() == 1) && self.environment.controlled
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serializes")
    }

    pub fn from_json_line(line: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(line)
    }

    pub fn csv_row(&self) -> [String; 12] {
        let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let u = |v: Option<u64>| v.map(|x| x.to_string()).unwrap_or_default();
        [
            self.benchmark.clone(),
            self.language_impl.clone(),
            self.repetition.to_string(),
            f(self.wall_time_s),
            f(self.energy.pkg_joules),
            f(self.energy.dram_joules),
            f(self.avg_power.pkg_watts),
            f(self.avg_power.dram_watts),
            f(self.usage.map(|u| u.avg_active_cores)),
            u(self.perf.and_then(|p| p.llc_misses)),
            u(self.perf.map(|p| p.task_clock_ns)),
            self.exit_status.map(|s| s.to_string()).unwrap_or_default(),
        ]
    }
}

/// Appends records to a JSON-lines file, one flush per record.
pub struct RecordLog {
    out: BufWriter<File>,
}

impl RecordLog {
    pub fn append(path: &Path) -> Result<Self, HarnessError> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| HarnessError::io(parent, e))?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(|e| HarnessError::io(path, e))?;
        Ok(RecordLog { out: BufWriter::new(file) })
    }

    pub fn write(&mut self, record: &MeasurementRecord) -> std::io::Result<()> {
        self.out.write_all(record.to_json_line().as_bytes())?;
        self.out.write_all(b"\n")?;
        self.out.flush()
    }
}

pub fn read_log(path: &Path) -> Result<Vec<MeasurementRecord>, HarnessError> {
    let file = File::open(path).map_err(|e| HarnessError::io(path, e))?;
    parse_log(BufReader::new(file)).map_err(|e| match e {
        HarnessError::Format(msg) => HarnessError::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn parse_log(reader: impl BufRead) -> Result<Vec<MeasurementRecord>, HarnessError> {
    let mut records = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| HarnessError::Format(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = MeasurementRecord::from_json_line(&line)
            .map_err(|e| HarnessError::Format(format!("line {}: {e}", i + 1)))?;
        if record.format != RECORD_FORMAT {
            return Err(HarnessError::Format(format!("line {}: unknown record format `{}`", i + 1, record.format)));
        }
        records.push(record);
    }
    Ok(records)
}

pub fn write_csv<W: Write>(records: &[MeasurementRecord], out: W) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(out);
    let map = |e: csv::Error| HarnessError::Format(e.to_string());
    w.write_record(CSV_COLUMNS).map_err(map)?;
    for r in records {
        w.write_record(r.csv_row()).map_err(map)?;
    }
    w.flush().map_err(|e| HarnessError::Format(e.to_string()))
}

/// One parsed row of the CSV export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub benchmark: String,
    pub language_impl: String,
    pub repetition: u32,
    pub wall_time_s: Option<f64>,
    pub pkg_joules: Option<f64>,
    pub dram_joules: Option<f64>,
    pub pkg_watts: Option<f64>,
    pub dram_watts: Option<f64>,
    pub avg_cores: Option<f64>,
    pub llc_misses: Option<u64>,
    pub task_clock_ns: Option<u64>,
    pub exit_status: Option<i32>,
}

pub fn read_csv<R: Read>(input: R) -> Result<Vec<CsvRow>, HarnessError> {
    let mut reader = csv::Reader::from_reader(input);
    let headers = reader.headers().map_err(|e| HarnessError::Format(e.to_string()))?;
    if headers.iter().ne(CSV_COLUMNS.iter().copied()) {
        return Err(HarnessError::Format(format!(
            "unexpected CSV header `{}` (expected `{}`)",
            headers.iter().collect::<Vec<_>>().join(","),
            CSV_COLUMNS.join(",")
        )));
    }
    reader
        .deserialize()
        .enumerate()
        .map(|(i, row)| row.map_err(|e| HarnessError::Format(format!("CSV row {}: {e}", i + 1))))
        .collect()
}
