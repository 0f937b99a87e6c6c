//! Suite configuration: what to run and under which controls.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::perf::LlcEvent;
use crate::sampler::{SessionConfig, DEFAULT_MAX_POWER_W};

use super::HarnessError;

pub const SUITE_FORMAT: &str = "joulemeter-suite/1";
pub const DEFAULT_REPETITIONS: u32 = 10;
pub const ITERATIONS_PLACEHOLDER: &str = "{iterations}";

/// How a benchmark receives its in-process iteration count.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IterationHook {
    /// Environment variable set to the iteration count.
    #[serde(default)]
    pub env: Option<String>,
    /// Replace every `{iterations}` in the command with the count.
    #[serde(default)]
    pub placeholder: bool,
}

impl IterationHook {
    pub fn is_declared(&self) -> bool {
        self.env.is_some() || self.placeholder
    }
}

/// Run the command inside a container runtime with `--cpuset-cpus`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContainerConfig {
    #[serde(default = "default_runtime")]
    pub runtime: String,
    pub image: String,
    #[serde(default)]
    pub extra_args: Vec<String>,
}

fn default_runtime() -> String {
    "docker".into()
}

fn default_iterations() -> u32 {
    1
}

fn default_repetitions() -> u32 {
    DEFAULT_REPETITIONS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkSpec {
    pub name: String,
    /// Implementation identifier, e.g. `openjdk-21` or `node-22.1`.
    pub language_impl: String,
    pub command: Vec<String>,
    #[serde(default)]
    pub stdin_file: Option<PathBuf>,
    #[serde(default)]
    pub working_dir: Option<PathBuf>,
    #[serde(default)]
    pub env: BTreeMap<String, String>,
    #[serde(default = "default_iterations")]
    pub in_process_iterations: u32,
    #[serde(default = "default_repetitions")]
    pub external_repetitions: u32,
    #[serde(default)]
    pub cpuset: Option<Vec<usize>>,
    /// SHA-256 of the expected standard output, hex encoded.
    #[serde(default)]
    pub expected_output_digest: Option<String>,
    #[serde(default)]
    pub iterations: IterationHook,
    /// Run once per listed iteration count instead of once.
    #[serde(default)]
    pub iteration_sweep: Option<Vec<u32>>,
    #[serde(default)]
    pub container: Option<ContainerConfig>,
}

impl BenchmarkSpec {
    pub fn new(name: impl Into<String>, language_impl: impl Into<String>, command: Vec<String>) -> Self {
        BenchmarkSpec {
            name: name.into(),
            language_impl: language_impl.into(),
            command,
            stdin_file: None,
            working_dir: None,
            env: BTreeMap::new(),
            in_process_iterations: 1,
            external_repetitions: DEFAULT_REPETITIONS,
            cpuset: None,
            expected_output_digest: None,
            iterations: IterationHook::default(),
            iteration_sweep: None,
            container: None,
        }
    }

    pub fn validate(&self, logical_cores: Option<usize>) -> Result<(), HarnessError> {
        let err = |msg: String| {
            Err(HarnessError::Config(format!("benchmark `{}` ({}): {msg}", self.name, self.language_impl)))
        };
        if self.name.is_empty() || self.language_impl.is_empty() {
            return err("name and language_impl must be non-empty".into());
        }
        if self.command.is_empty() || self.command[0].is_empty() {
            return err("command must be non-empty".into());
        }
        if self.in_process_iterations == 0 || self.external_repetitions == 0 {
            return err("iterations and repetitions must be at least 1".into());
        }
        if self.in_process_iterations > 1 && !self.iterations.is_declared() {
            return err("in_process_iterations > 1 needs an iteration hook".into());
        }
        if let Some(sweep) = &self.iteration_sweep {
            if sweep.is_empty() || sweep.contains(&0) {
                return err("iteration_sweep entries must be at least 1".into());
            }
            if !self.iterations.is_declared() {
                return err("iteration_sweep needs an iteration hook".into());
            }
        }
        if let Some(cpus) = &self.cpuset {
            if cpus.is_empty() {
                return err("cpuset must list at least one core".into());
            }
            if let Some(n) = logical_cores {
                if let Some(bad) = cpus.iter().find(|&&c| c >= n) {
                    return err(format!("cpuset core {bad} does not exist (machine has {n} logical cores)"));
                }
            }
        }
        if let Some(d) = &self.expected_output_digest {
            let hex = d.strip_prefix("sha256:").unwrap_or(d);
            if hex.len() != 64 || !hex.chars().all(|c| c.is_ascii_hexdigit()) {
                return err("expected_output_digest must be a SHA-256 hex digest".into());
            }
        }
        if self.container.is_some() && self.cpuset.is_none() {
            return err("container isolation needs a cpuset".into());
        }
        Ok(())
    }

    pub fn pinned_single_core(&self) -> bool {
        self.cpuset.as_ref().is_some_and(|c| c.len() == 1)
    }

    /// Iteration counts this spec expands to.
    pub fn iteration_counts(&self) -> Vec<u32> {
        self.iteration_sweep.clone().unwrap_or_else(|| vec![self.in_process_iterations])
    }

    /// Final argument vector and extra environment for one run, with the
    /// iteration hook applied and container wrapping if configured.
    pub fn launch_command(&self) -> (Vec<String>, BTreeMap<String, String>) {
        let count = self.in_process_iterations.to_string();
        let mut argv: Vec<String> = if self.iterations.placeholder {
            self.command.iter().map(|a| a.replace(ITERATIONS_PLACEHOLDER, &count)).collect()
        } else {
            self.command.clone()
        };
        let mut env = self.env.clone();
        if let Some(var) = &self.iterations.env {
            env.insert(var.clone(), count);
        }
        if let Some(container) = &self.container {
            let cpus = self.cpuset.as_ref().map(|c| c.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(","));
            let mut wrapped = vec![container.runtime.clone(), "run".into(), "--rm".into()];
            if self.stdin_file.is_some() {
                wrapped.push("-i".into());
            }
            if let Some(cpus) = cpus {
                wrapped.push(format!("--cpuset-cpus={cpus}"));
            }
            for (k, v) in &env {
                wrapped.push("-e".into());
                wrapped.push(format!("{k}={v}"));
            }
            wrapped.extend(container.extra_args.iter().cloned());
            wrapped.push(container.image.clone());
            wrapped.append(&mut argv);
            argv = wrapped;
        }
        (argv, env)
    }
}

/// Derive a spec that performs the workload `iterations` times in one process.
pub fn wrap_iterations(spec: &BenchmarkSpec, iterations: u32) -> Result<BenchmarkSpec, HarnessError> {
    if iterations == 0 {
        return Err(HarnessError::Config("iteration count must be at least 1".into()));
    }
    if !spec.iterations.is_declared() {
        return Err(HarnessError::Config(format!(
            "benchmark `{}` ({}) does not declare an iteration hook",
            spec.name, spec.language_impl
        )));
    }
    Ok(BenchmarkSpec { in_process_iterations: iterations, iteration_sweep: None, ..spec.clone() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerfSettings {
    #[serde(default = "yes")]
    pub enabled: bool,
    #[serde(default)]
    pub llc: LlcEvent,
}

fn yes() -> bool {
    true
}

impl Default for PerfSettings {
    fn default() -> Self {
        PerfSettings { enabled: true, llc: LlcEvent::default() }
    }
}

fn default_period_s() -> f64 {
    1.0
}

fn default_max_power() -> f64 {
    DEFAULT_MAX_POWER_W
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteConfig {
    pub format: String,
    #[serde(default)]
    pub output: Option<PathBuf>,
    /// `hardware` or `simulated:<trajectory-file>`.
    #[serde(default)]
    pub backend: Option<String>,
    #[serde(default = "default_period_s")]
    pub sampling_period_s: f64,
    #[serde(default = "default_max_power")]
    pub max_power_w: f64,
    #[serde(default)]
    pub perf: PerfSettings,
    /// Environment variables applied to every benchmark (per-benchmark
    /// values win).
    #[serde(default)]
    pub env: BTreeMap<String, String>,
    #[serde(default)]
    pub benchmarks: Vec<BenchmarkSpec>,
    /// Directory relative paths resolve against; set when loading a file.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

impl SuiteConfig {
    pub fn new(benchmarks: Vec<BenchmarkSpec>) -> Self {
        SuiteConfig {
            format: SUITE_FORMAT.into(),
            output: None,
            backend: None,
            sampling_period_s: default_period_s(),
            max_power_w: DEFAULT_MAX_POWER_W,
            perf: PerfSettings::default(),
            env: BTreeMap::new(),
            benchmarks,
            base_dir: None,
        }
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read suite file {}: {e}", path.display())))?;
        let mut config = Self::parse(&text)?;
        config.base_dir =
            path.parent().map(|p| if p.as_os_str().is_empty() { PathBuf::from(".") } else { p.to_path_buf() });
        Ok(config)
    }

    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let config: SuiteConfig = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        config.validate(None)?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("suite config serializes")
    }

    pub fn validate(&self, logical_cores: Option<usize>) -> Result<(), HarnessError> {
        if self.format != SUITE_FORMAT {
            return Err(HarnessError::Config(format!("format tag `{}` (expected `{SUITE_FORMAT}`)", self.format)));
        }
        if !(self.sampling_period_s > 0.0 && self.sampling_period_s.is_finite()) {
            return Err(HarnessError::Config("sampling_period_s must be positive".into()));
        }
        let mut seen = BTreeSet::new();
        for spec in &self.benchmarks {
            spec.validate(logical_cores)?;
            if !seen.insert((spec.name.as_str(), spec.language_impl.as_str())) {
                return Err(HarnessError::Config(format!(
                    "benchmark `{}` ({}) is declared twice",
                    spec.name, spec.language_impl
                )));
            }
        }
        Ok(())
    }

    pub fn session_config(&self) -> SessionConfig {
        SessionConfig {
            period: Duration::from_secs_f64(self.sampling_period_s),
            max_power_w: self.max_power_w,
            domains: None,
        }
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        match &self.base_dir {
            Some(base) if path.is_relative() => base.join(path),
            _ => path.to_path_buf(),
        }
    }
}
