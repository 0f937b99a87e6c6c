//! Read-only inspection of the frequency and load conditions a run happens
//! under. Nothing here changes machine state.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TurboState {
    Enabled,
    Disabled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentFingerprint {
    /// Scaling governor shared by every core, `mixed` when they differ.
    pub governor: Option<String>,
    /// Every core's scaling window is pinned to the hardware minimum.
    pub min_frequency_pinned: Option<bool>,
    pub turbo: Option<TurboState>,
    pub logical_cores: Option<usize>,
    pub machine_id: Option<String>,
    pub load_average_1m: Option<f64>,
    pub running_processes: Option<u32>,
    /// Frequency fixed at minimum with turbo off.
    pub controlled: bool,
    pub warnings: Vec<String>,
}

impl EnvironmentFingerprint {
    pub fn unknown() -> Self {
        EnvironmentFingerprint {
            governor: None,
            min_frequency_pinned: None,
            turbo: None,
            logical_cores: None,
            machine_id: None,
            load_average_1m: None,
            running_processes: None,
            controlled: false,
            warnings: Vec::new(),
        }
    }
}

/// Filesystem roots consulted by [`environment_check`].
#[derive(Debug, Clone)]
pub struct SystemPaths {
    pub sysfs_cpu: PathBuf,
    pub procfs: PathBuf,
    pub machine_id: PathBuf,
}

impl Default for SystemPaths {
    fn default() -> Self {
        SystemPaths {
            sysfs_cpu: PathBuf::from("/sys/devices/system/cpu"),
            procfs: PathBuf::from("/proc"),
            machine_id: PathBuf::from("/etc/machine-id"),
        }
    }
}

pub fn environment_check() -> EnvironmentFingerprint {
    environment_check_at(&SystemPaths::default())
}

fn read_trim(path: &Path) -> Option<String> {
    fs::read_to_string(path).ok().map(|s| s.trim().to_string())
}

fn cpu_dirs(sysfs_cpu: &Path) -> Vec<PathBuf> {
    let mut dirs: Vec<(u32, PathBuf)> = fs::read_dir(sysfs_cpu)
        .into_iter()
        .flatten()
        .flatten()
        .filter_map(|e| {
            let n = e.file_name().to_str()?.strip_prefix("cpu")?.parse::<u32>().ok()?;
            Some((n, e.path()))
        })
        .collect();
    dirs.sort();
    dirs.into_iter().map(|(_, p)| p).collect()
}

pub fn environment_check_at(paths: &SystemPaths) -> EnvironmentFingerprint {
    let mut fp = EnvironmentFingerprint::unknown();
    let cpus = cpu_dirs(&paths.sysfs_cpu);
    if !cpus.is_empty() {
        fp.logical_cores = Some(cpus.len());
    } else if let Ok(n) = std::thread::available_parallelism() {
        fp.logical_cores = Some(n.get());
    }

    let governors: Vec<String> = cpus.iter().filter_map(|c| read_trim(&c.join("cpufreq/scaling_governor"))).collect();
    if governors.is_empty() {
        fp.warnings.push("scaling governor unreadable".into());
    } else {
        fp.governor =
            Some(if governors.iter().all(|g| *g == governors[0]) { governors[0].clone() } else { "mixed".into() });
    }

    let pinned: Option<Vec<bool>> = cpus
        .iter()
        .map(|c| {
            let read = |f: &str| read_trim(&c.join("cpufreq").join(f))?.parse::<u64>().ok();
            Some(
                read("scaling_min_freq")? == read("cpuinfo_min_freq")?
                    && read("scaling_max_freq")? == read("cpuinfo_min_freq")?,
            )
        })
        .collect();
    match pinned {
        Some(p) if !p.is_empty() => fp.min_frequency_pinned = Some(p.iter().all(|&x| x)),
        _ => fp.warnings.push("frequency limits unreadable".into()),
    }

    fp.turbo = read_trim(&paths.sysfs_cpu.join("intel_pstate/no_turbo"))
        .map(|v| if v == "1" { TurboState::Disabled } else { TurboState::Enabled })
        .or_else(|| {
            read_trim(&paths.sysfs_cpu.join("cpufreq/boost")).map(|v| {
                if v == "0" {
                    TurboState::Disabled
                } else {
                    TurboState::Enabled
                }
            })
        });
    if fp.turbo.is_none() {
        fp.warnings.push("turbo state unreadable".into());
    }

    fp.machine_id = read_trim(&paths.machine_id).filter(|s| !s.is_empty());

    if let Some(loadavg) = read_trim(&paths.procfs.join("loadavg")) {
        let fields: Vec<&str> = loadavg.split_whitespace().collect();
        fp.load_average_1m = fields.first().and_then(|v| v.parse().ok());
        fp.running_processes = fields.get(3).and_then(|v| v.split('/').next()).and_then(|v| v.parse().ok());
    }

    fp.controlled = fp.min_frequency_pinned == Some(true)
        && fp.turbo == Some(TurboState::Disabled)
        && fp.governor.as_deref().is_some_and(|g| g != "mixed" && g != "performance");
    if !fp.controlled {
        fp.warnings.push("frequency is not pinned to minimum with turbo disabled; power draw may vary".into());
    }
    if fp.load_average_1m.is_some_and(|l| l > 0.5) {
        fp.warnings.push("background load is present; stop non-essential services before measuring".into());
    }
    fp
}
