use std::fs::File;
use std::io::{self, Read, Seek, SeekFrom};
use std::os::unix::process::ExitStatusExt;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use log::{info, warn};
use sha2::{Digest, Sha256};

use crate::backend::{BackendError, CounterBackend, SimulatedRun};
use crate::perf::{CounterGroup, PerfCounters, Target, UsageSummary};
use crate::sampler::{Session, SessionConfig};

use super::env::{environment_check, EnvironmentFingerprint};
use super::process::{resolve_program, spawn_gated, Launch};
use super::record::{EnergyBreakdown, MeasurementRecord, Outcome, PowerBreakdown, RECORD_FORMAT};
use super::spec::{wrap_iterations, BenchmarkSpec, SuiteConfig};
use super::HarnessError;

pub const STDERR_TAIL_BYTES: u64 = 8 * 1024;

struct Context<'a, F> {
    suite: &'a SuiteConfig,
    session: SessionConfig,
    environment: EnvironmentFingerprint,
    open_backend: F,
}

/// Run every benchmark × iteration count × repetition in order, handing each
/// record to `sink` as soon as it exists.
///
/// Per-run failures become failure records. Errors are returned only when
/// the suite cannot start: invalid configuration or no usable backend.
pub fn run_suite<F, S>(
    suite: &SuiteConfig,
    mut open_backend: F,
    mut sink: S,
) -> Result<Vec<MeasurementRecord>, HarnessError>
where
    F: FnMut() -> Result<Box<dyn CounterBackend>, BackendError>,
    S: FnMut(&MeasurementRecord) -> io::Result<()>,
{
    let environment = environment_check();
    for w in &environment.warnings {
        warn!("{w}");
    }
    suite.validate(environment.logical_cores)?;
    let session = suite.session_config();

    // Fail fast on a backend that cannot open or whose period bound fails.
    {
        let mut probe = open_backend()?;
        let domains: Vec<_> = probe.topology().iter().map(|s| s.domain).collect();
        for domain in domains {
            session.validate(probe.energy_unit(domain)?)?;
        }
    }

    let mut ctx = Context { suite, session, environment, open_backend };
    let mut records = Vec::new();
    for spec in &suite.benchmarks {
        for iterations in spec.iteration_counts() {
            let derived =
                if spec.iteration_sweep.is_some() { wrap_iterations(spec, iterations)? } else { spec.clone() };
            for repetition in 0..derived.external_repetitions {
                info!(
                    "running {} ({}) iterations={} repetition={}",
                    derived.name, derived.language_impl, iterations, repetition
                );
                let record = run_once(&mut ctx, &derived, repetition);
                if !record.is_success() {
                    warn!(
                        "{} ({}) repetition {}: {:?} {}",
                        record.benchmark,
                        record.language_impl,
                        repetition,
                        record.outcome,
                        record.error.as_deref().unwrap_or("")
                    );
                }
                sink(&record).map_err(|e| HarnessError::Io { path: PathBuf::from("<record sink>"), source: e })?;
                records.push(record);
            }
        }
    }
    Ok(records)
}

fn base_record(spec: &BenchmarkSpec, repetition: u32, environment: &EnvironmentFingerprint) -> MeasurementRecord {
    MeasurementRecord {
        format: RECORD_FORMAT.into(),
        benchmark: spec.name.clone(),
        language_impl: spec.language_impl.clone(),
        repetition,
        in_process_iterations: spec.in_process_iterations,
        cpuset: spec.cpuset.clone(),
        backend: String::new(),
        outcome: Outcome::Ok,
        exit_status: None,
        signal: None,
        wall_time_s: None,
        energy: EnergyBreakdown::default(),
        avg_power: PowerBreakdown::default(),
        perf: None,
        usage: None,
        task_clock_source: None,
        started_unix_ms: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0),
        environment: environment.clone(),
        error: None,
        stderr_tail: None,
        warnings: Vec::new(),
    }
}

fn fail(mut record: MeasurementRecord, outcome: Outcome, message: impl Into<String>) -> MeasurementRecord {
    record.outcome = outcome;
    record.error = Some(message.into());
    record
}

fn run_once<F>(ctx: &mut Context<'_, F>, spec: &BenchmarkSpec, repetition: u32) -> MeasurementRecord
where
    F: FnMut() -> Result<Box<dyn CounterBackend>, BackendError>,
{
    let mut record = base_record(spec, repetition, &ctx.environment);
    let suite = ctx.suite;

    let (argv, spec_env) = spec.launch_command();
    let mut env = suite.env.clone();
    env.extend(spec_env);
    let working_dir = spec.working_dir.as_deref().map(|d| suite.resolve(d)).or_else(|| suite.base_dir.clone());
    if resolve_program(&argv[0], env.get("PATH").map(String::as_str), working_dir.as_deref()).is_none() {
        return fail(record, Outcome::CommandNotFound, format!("command not found: {}", argv[0]));
    }

    let stdout = match tempfile::NamedTempFile::new() {
        Ok(f) => f,
        Err(e) => return fail(record, Outcome::SpawnFailed, format!("cannot create stdout capture: {e}")),
    };
    let stderr = match tempfile::NamedTempFile::new() {
        Ok(f) => f,
        Err(e) => return fail(record, Outcome::SpawnFailed, format!("cannot create stderr capture: {e}")),
    };
    let launch = Launch {
        argv,
        working_dir,
        env,
        stdin: spec.stdin_file.as_deref().map(|p| suite.resolve(p)),
        stdout: Some(stdout.path().to_path_buf()),
        stderr: Some(stderr.path().to_path_buf()),
        affinity: if spec.container.is_none() { spec.cpuset.clone() } else { None },
    };

    let backend = match (ctx.open_backend)() {
        Ok(b) => b,
        Err(e) => return fail(record, Outcome::MeasurementFailed, e.to_string()),
    };
    record.backend = backend.name().to_string();
    let simulated = backend.simulation().is_some();
    let model: Option<SimulatedRun> =
        backend.simulation().and_then(|t| t.run_for(&spec.name, &spec.language_impl)).cloned();

    let mut child = match spawn_gated(&launch) {
        Ok(c) => c,
        Err(e) => return fail(record, Outcome::SpawnFailed, format!("spawn failed: {e}")),
    };

    let mut group = None;
    if suite.perf.enabled && model.is_none() {
        match CounterGroup::attach(Target::Process(child.pid()), suite.perf.llc, true) {
            Ok(g) => group = Some(g),
            Err(e) => record.warnings.push(format!("perf counters unavailable, using rusage task clock: {e}")),
        }
    }

    let session =
        if simulated { Session::start_virtual(&ctx.session, backend) } else { Session::start(&ctx.session, backend) };
    let mut session = match session {
        Ok(s) => s,
        Err(e) => {
            let _ = child.wait();
            return fail(record, Outcome::MeasurementFailed, e.to_string());
        }
    };

    let started = Instant::now();
    let released = child.release();
    let exit = child.wait();
    let real_elapsed = started.elapsed();

    if simulated {
        let virtual_time =
            model.as_ref().map_or(real_elapsed, |m| Duration::from_secs_f64(m.duration_s(spec.in_process_iterations)));
        if let Err(e) = session.advance(virtual_time) {
            record.warnings.push(e.to_string());
        }
    }
    let session_result = session.stop();

    if let Err(e) = released {
        return fail(record, Outcome::SpawnFailed, format!("could not release workload: {e}"));
    }
    let exit = match exit {
        Ok(x) => x,
        Err(e) => return fail(record, Outcome::SpawnFailed, format!("wait failed: {e}")),
    };
    record.exit_status = exit.status.code();
    record.signal = exit.status.signal();

    let result = match session_result {
        Ok(r) => r,
        Err(e) => return fail(record, Outcome::MeasurementFailed, e.to_string()),
    };
    if result.late_intervals > 0 {
        record.warnings.push(format!("{} sampling interval(s) exceeded twice the period", result.late_intervals));
    }
    let account = match result.energy() {
        Ok(a) => a,
        Err(e) => return fail(record, Outcome::MeasurementFailed, e.to_string()),
    };
    let wall_ns = result.end_ns - result.start_ns;
    let wall_time_s = result.wall_time_s();
    record.wall_time_s = Some(wall_time_s);
    record.energy = EnergyBreakdown::from_account(&account);
    record.avg_power = PowerBreakdown::from_energy(&record.energy, wall_time_s);

    let counters = if let Some(m) = &model {
        record.task_clock_source = Some("simulated".into());
        Some(PerfCounters {
            task_clock_ns: (m.avg_active_cores * wall_ns as f64).round() as u64,
            llc_misses: Some((m.llc_misses_per_s * wall_time_s).round() as u64),
            llc_references: m.llc_references_per_s.map(|r| (r * wall_time_s).round() as u64),
        })
    } else if let Some(g) = &mut group {
        match g.read() {
            Ok(reading) => {
                record.task_clock_source = Some("perf".into());
                record.warnings.extend(reading.warnings);
                Some(reading.counters)
            }
            Err(e) => {
                record.warnings.push(e.to_string());
                None
            }
        }
    } else if suite.perf.enabled {
        record.task_clock_source = Some("rusage".into());
        Some(PerfCounters { task_clock_ns: exit.cpu_time.as_nanos() as u64, llc_misses: None, llc_references: None })
    } else {
        None
    };
    if let Some(c) = counters {
        record.perf = Some(c);
        match UsageSummary::from_counters(&c, wall_ns) {
            Ok(u) => record.usage = Some(u),
            Err(e) => record.warnings.push(e.to_string()),
        }
    }

    if !exit.status.success() {
        let what = match (exit.status.code(), exit.status.signal()) {
            (Some(code), _) => format!("exited with status {code}"),
            (None, Some(sig)) => format!("killed by signal {sig}"),
            _ => "terminated abnormally".to_string(),
        };
        record.stderr_tail = stderr_tail(stderr.path());
        return fail(record, Outcome::NonzeroExit, what);
    }
    if let Some(expected) = &spec.expected_output_digest {
        let expected = expected.strip_prefix("sha256:").unwrap_or(expected).to_ascii_lowercase();
        match sha256_file(stdout.path()) {
            Ok(actual) if actual == expected => {}
            Ok(actual) => {
                record.stderr_tail = stderr_tail(stderr.path());
                return fail(
                    record,
                    Outcome::DigestMismatch,
                    format!("output digest {actual} does not match {expected}"),
                );
            }
            Err(e) => return fail(record, Outcome::DigestMismatch, format!("cannot hash output: {e}")),
        }
    }
    record
}

fn sha256_file(path: &Path) -> io::Result<String> {
    let mut hasher = Sha256::new();
    io::copy(&mut File::open(path)?, &mut hasher)?;
    Ok(hex::encode(hasher.finalize()))
}

fn stderr_tail(path: &Path) -> Option<String> {
    let mut file = File::open(path).ok()?;
    let len = file.metadata().ok()?.len();
    file.seek(SeekFrom::Start(len.saturating_sub(STDERR_TAIL_BYTES))).ok()?;
    let mut buf = Vec::new();
    file.read_to_end(&mut buf).ok()?;
    (!buf.is_empty()).then(|| String::from_utf8_lossy(&buf).into_owned())
}
