use std::fmt::Write as _;
use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use log::info;

use joulemeter::analysis::{
    core_power_points, detect_confounds, fit_linear_memory, fit_log_cores, fit_report, memory_power_points, normalize,
    predict_power, scatter_svg, ConfoundConfig, FlagStatus, ModelKind, NormalizeOptions, PowerModel,
    WorkloadDescriptor,
};
use joulemeter::backend::{BackendError, CounterBackend, SimulatedBackend, Trajectory};
use joulemeter::harness::{environment_check, read_log, run_suite, write_csv, HarnessError, RecordLog, SuiteConfig};
use joulemeter::{BackendSpec, Domain};

use crate::input::{load_observations, InputKind};
use crate::{CliError, Command, FitArgs, GlobalOptions, PredictArgs};

const DEFAULT_LOG: &str = "joulemeter-results.jsonl";

pub fn dispatch(command: Command, global: &GlobalOptions) -> Result<(), CliError> {
    match command {
        Command::Run { suite } => run(&suite, global),
        Command::CheckEnv { json } => check_env(global, json),
        Command::ExportCsv { log } => export_csv(&log, global),
        Command::FitPower(args) => fit(ModelKind::LogCores, &args, global),
        Command::FitMemory(args) => fit(ModelKind::LinearMemory, &args, global),
        Command::Normalize { input, baseline, mean, energy, json } => {
            let (obs, _) = load_observations(&input)?;
            let options = NormalizeOptions { baseline, mean: mean.into(), energy };
            let table = normalize(&obs, &options).map_err(|e| CliError::config("analysis", e))?;
            if json {
                return emit(&to_json(&table), global);
            }
            let mut out = String::new();
            let _ =
                writeln!(out, "baseline: {} ({:?} mean, {:?} energy)", table.baseline_impl, table.mean, table.energy);
            let _ = writeln!(out, "{:<24} {:>10} {:>10} {:>11}", "implementation", "time", "energy", "benchmarks");
            for r in &table.rows {
                let _ = writeln!(
                    out,
                    "{:<24} {:>10.2} {:>10.2} {:>11}",
                    r.language_impl, r.normalized_time, r.normalized_energy, r.benchmarks
                );
            }
            for note in &table.notes {
                let _ = writeln!(out, "note: {note}");
            }
            emit(&out, global)
        }
        Command::Confounds { input, pinned, parallelism_ratio, power_band, warmup_ratio, json } => {
            let (mut obs, kind) = load_observations(&input)?;
            if pinned {
                obs.iter_mut().for_each(|o| o.power_controlled = Some(true));
            }
            let config = ConfoundConfig { parallelism_ratio, power_band_w: power_band, warmup_ratio };
            let mut report = detect_confounds(&obs, &config);
            if kind == InputKind::Csv {
                report.notes.push("CSV input has no iteration counts; warmup skew needs the record log".into());
            }
            if json {
                return emit(&to_json(&report), global);
            }
            let mut out = String::new();
            for f in &report.flags {
                let status = match f.status {
                    FlagStatus::Clear => "clear",
                    FlagStatus::Flagged => "FLAGGED",
                    FlagStatus::NotEvaluated => "not-evaluated",
                };
                let _ = write!(out, "{status:<14} {:?} {} [{}]", f.kind, f.benchmark, f.implementations.join(", "));
                if let (Some(v), Some(t)) = (f.value, f.threshold) {
                    let _ = write!(out, " value={v:.4} threshold={t}");
                }
                let _ = writeln!(out, ": {}", f.detail);
                if !f.records.is_empty() {
                    let _ = writeln!(out, "    records: {}", f.records.join(", "));
                }
            }
            for note in &report.notes {
                let _ = writeln!(out, "note: {note}");
            }
            emit(&out, global)
        }
        Command::Predict(args) => predict(&args, global),
    }
}

fn to_json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("analysis results serialize") + "\n"
}

fn emit(text: &str, global: &GlobalOptions) -> Result<(), CliError> {
    match &global.output {
        Some(path) => {
            std::fs::write(path, text).map_err(|e| CliError::config("output", format!("{}: {e}", path.display())))
        }
        None => {
            let _ = io::stdout().write_all(text.as_bytes());
            Ok(())
        }
    }
}

fn harness_error(e: HarnessError) -> CliError {
    let kind = match &e {
        HarnessError::Config(_) => "config",
        HarnessError::Backend(BackendError::PermissionDenied { .. }) => "permission",
        HarnessError::Backend(_) => "backend",
        HarnessError::Sampler(_) => "sampler",
        HarnessError::Io { .. } => "io",
        HarnessError::Format(_) => "format",
    };
    CliError::config(kind, e)
}

type Opener = Box<dyn FnMut() -> Result<Box<dyn CounterBackend>, BackendError>>;

fn opener(spec: &BackendSpec) -> Result<Opener, CliError> {
    match spec {
        BackendSpec::Hardware => Ok(Box::new(|| BackendSpec::Hardware.open())),
        BackendSpec::Simulated(path) => {
            let trajectory = Trajectory::load(path).map_err(|e| CliError::config("backend", e))?;
            SimulatedBackend::new(trajectory.clone()).map_err(|e| CliError::config("backend", e))?;
            Ok(Box::new(move || Ok(Box::new(SimulatedBackend::new(trajectory.clone())?) as Box<dyn CounterBackend>)))
        }
    }
}

fn suite_backend(suite: &SuiteConfig, global: &GlobalOptions) -> Result<BackendSpec, CliError> {
    if let Some(b) = &global.backend {
        return Ok(b.clone());
    }
    match &suite.backend {
        None => Ok(BackendSpec::Hardware),
        Some(text) => match text.parse().map_err(|e: String| CliError::config("config", e))? {
            BackendSpec::Simulated(p) => Ok(BackendSpec::Simulated(suite.resolve(&p))),
            hw => Ok(hw),
        },
    }
}

fn run(suite_path: &Path, global: &GlobalOptions) -> Result<(), CliError> {
    let mut suite = SuiteConfig::load(suite_path).map_err(harness_error)?;
    if let Some(period) = global.period {
        suite.sampling_period_s = period.as_secs_f64();
    }
    let backend = suite_backend(&suite, global)?;
    let open = opener(&backend)?;
    let output: PathBuf = match (&global.output, &suite.output) {
        (Some(p), _) => p.clone(),
        (None, Some(p)) => suite.resolve(p),
        (None, None) => PathBuf::from(DEFAULT_LOG),
    };
    let mut log = RecordLog::append(&output).map_err(harness_error)?;
    info!("backend {backend}, appending records to {}", output.display());

    let records = run_suite(&suite, open, |r| log.write(r)).map_err(harness_error)?;
    let failed = records.iter().filter(|r| !r.is_success()).count();
    let mut out = String::new();
    for r in &records {
        let num = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.3}"));
        let _ = writeln!(
            out,
            "{:<20} {:<16} #{:<3} {:<18} wall {:>9} s  pkg {:>10} J  dram {:>9} J",
            r.benchmark,
            r.language_impl,
            r.repetition,
            format!("{:?}", r.outcome),
            num(r.wall_time_s),
            num(r.energy.pkg_joules),
            num(r.energy.dram_joules)
        );
    }
    let _ = writeln!(out, "{} runs, {} failed; records appended to {}", records.len(), failed, output.display());
    let _ = io::stdout().write_all(out.as_bytes());
    if failed > 0 {
        return Err(CliError::RunFailures { failed, total: records.len() });
    }
    Ok(())
}

fn check_env(global: &GlobalOptions, json: bool) -> Result<(), CliError> {
    let fp = environment_check();
    let spec = global.backend.clone().unwrap_or(BackendSpec::Hardware);
    let probe = match opener(&spec).and_then(|mut open| open().map_err(|e| CliError::config("backend", e))) {
        Ok(mut backend) => {
            let streams: Vec<String> =
                backend.topology().iter().map(|s| format!("{}:{}", s.domain, s.package)).collect();
            let mut units = serde_json::Map::new();
            for d in Domain::ALL {
                if backend.topology().iter().any(|s| s.domain == d) {
                    let value = match backend.energy_unit(d) {
                        Ok(u) => {
                            serde_json::json!({ "exponent": u.exponent(), "joules_per_tick": u.joules_per_tick() })
                        }
                        Err(e) => serde_json::json!({ "error": e.to_string() }),
                    };
                    units.insert(d.to_string(), value);
                }
            }
            serde_json::json!({ "spec": spec.to_string(), "name": backend.name(), "streams": streams, "units": units })
        }
        Err(CliError::Config { message, .. }) => serde_json::json!({ "spec": spec.to_string(), "error": message }),
        Err(other) => return Err(other),
    };
    if json {
        let value = serde_json::json!({ "environment": fp, "backend": probe });
        return emit(&(serde_json::to_string_pretty(&value).unwrap() + "\n"), global);
    }
    let show = |v: Option<String>| v.unwrap_or_else(|| "unknown".into());
    let mut out = String::new();
    let _ = writeln!(out, "governor:             {}", show(fp.governor.clone()));
    let _ = writeln!(out, "pinned to min freq:   {}", show(fp.min_frequency_pinned.map(|b| b.to_string())));
    let _ = writeln!(out, "turbo:                {}", show(fp.turbo.map(|t| format!("{t:?}").to_lowercase())));
    let _ = writeln!(out, "logical cores:        {}", show(fp.logical_cores.map(|n| n.to_string())));
    let _ = writeln!(out, "load average (1 min): {}", show(fp.load_average_1m.map(|l| l.to_string())));
    let _ = writeln!(out, "running processes:    {}", show(fp.running_processes.map(|n| n.to_string())));
    let _ = writeln!(out, "controlled:           {}", fp.controlled);
    for w in &fp.warnings {
        let _ = writeln!(out, "warning: {w}");
    }
    let _ = writeln!(
        out,
        "backend {}: {}",
        spec,
        match probe.get("error") {
            Some(e) => format!("unavailable ({})", e.as_str().unwrap_or_default()),
            None => format!("{} streams {}", probe["name"].as_str().unwrap_or_default(), probe["streams"]),
        }
    );
    emit(&out, global)
}

fn export_csv(log: &Path, global: &GlobalOptions) -> Result<(), CliError> {
    let records = read_log(log).map_err(harness_error)?;
    match &global.output {
        Some(path) => {
            let file =
                File::create(path).map_err(|e| CliError::config("output", format!("{}: {e}", path.display())))?;
            write_csv(&records, file).map_err(harness_error)
        }
        None => write_csv(&records, io::stdout().lock()).map_err(harness_error),
    }
}

fn fit(kind: ModelKind, args: &FitArgs, global: &GlobalOptions) -> Result<(), CliError> {
    let (obs, _) = load_observations(&args.input)?;
    let (points, model) = match kind {
        ModelKind::LogCores => {
            let p = core_power_points(&obs);
            let m = fit_log_cores(&p);
            (p, m)
        }
        ModelKind::LinearMemory => {
            let p = memory_power_points(&obs);
            let m = fit_linear_memory(&p);
            (p, m)
        }
    };
    let model = model.map_err(|e| CliError::config("analysis", e))?;
    if let Some(plot) = &args.plot {
        let (title, x, y) = match kind {
            ModelKind::LogCores => {
                ("Package power vs active cores", "average active cores (log2 scale)", "package power (W)")
            }
            ModelKind::LinearMemory => ("DRAM power vs memory activity", "LLC misses per second", "DRAM power (W)"),
        };
        std::fs::write(plot, scatter_svg(&model, &points, title, x, y))
            .map_err(|e| CliError::config("output", format!("{}: {e}", plot.display())))?;
    }
    if args.json {
        return emit(&to_json(&model), global);
    }
    emit(&fit_report(&model, &points), global)
}

fn predict(args: &PredictArgs, global: &GlobalOptions) -> Result<(), CliError> {
    let workload =
        WorkloadDescriptor { avg_active_cores: args.cores, memory_activity: args.misses, duration_s: args.duration };
    workload.validate().map_err(|e| CliError::config("analysis", e))?;
    let pkg_model = PowerModel::with_parameters(ModelKind::LogCores, args.pkg_slope, args.pkg_intercept);
    let dram_model = PowerModel::with_parameters(ModelKind::LinearMemory, args.dram_slope, args.dram_intercept);
    let pkg = predict_power(&pkg_model, &workload).map_err(|e| CliError::config("analysis", e))?;
    let dram = predict_power(&dram_model, &workload).map_err(|e| CliError::config("analysis", e))?;
    if args.json {
        let value = serde_json::json!({ "workload": workload, "pkg": pkg, "dram": dram });
        return emit(&(serde_json::to_string_pretty(&value).unwrap() + "\n"), global);
    }
    let mut out = String::new();
    let _ = writeln!(out, "pkg:  {} W, {} J", pkg.watts, pkg.joules);
    let _ = writeln!(out, "dram: {} W, {} J", dram.watts, dram.joules);
    let _ = writeln!(out, "pkg+dram: {} W, {} J", pkg.watts + dram.watts, pkg.joules + dram.joules);
    emit(&out, global)
}
