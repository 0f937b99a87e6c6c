//! RAPL through the Linux `msr` driver (`/dev/cpu/<cpu>/msr`).
//!
//! | Register                | Address | Contents                          |
//! |-------------------------|---------|-----------------------------------|
//! | `MSR_RAPL_POWER_UNIT`   | `0x606` | energy-status unit in bits 12:8   |
//! | `MSR_PKG_ENERGY_STATUS` | `0x611` | package energy ticks, bits 31:0   |
//! | `MSR_DRAM_ENERGY_STATUS`| `0x619` | DRAM energy ticks, bits 31:0      |
//!
//! Reading requires the `msr` kernel module and `CAP_SYS_RAWIO` (in practice,
//! root). One CPU per package is used as that package's reader.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::ErrorKind;
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};
use std::time::Duration;

use crate::counter::{decode_unit, Domain, EnergyUnit, StreamId, UnitField};

use super::{BackendError, CounterAddress, CounterBackend, Register};

pub const MSR_RAPL_POWER_UNIT: u64 = 0x606;
pub const MSR_PKG_ENERGY_STATUS: u64 = 0x611;
pub const MSR_DRAM_ENERGY_STATUS: u64 = 0x619;

const PERMISSION_HINT: &str =
    "reading RAPL registers requires CAP_SYS_RAWIO and read access to /dev/cpu/*/msr (run as root)";

#[derive(Debug, Clone)]
pub struct MsrConfig {
    /// Directory holding `<cpu>/msr` device files.
    pub dev_root: PathBuf,
    /// Directory holding `cpu<N>/topology/physical_package_id`.
    pub sysfs_cpu_root: PathBuf,
    pub unit_field: UnitField,
    /// Fixed DRAM unit exponent for parts whose DRAM domain ignores the
    /// power-unit register.
    pub dram_unit_exponent: Option<u32>,
}

impl Default for MsrConfig {
    fn default() -> Self {
        MsrConfig {
            dev_root: PathBuf::from("/dev/cpu"),
            sysfs_cpu_root: PathBuf::from("/sys/devices/system/cpu"),
            unit_field: UnitField::default(),
            dram_unit_exponent: None,
        }
    }
}

pub struct MsrBackend {
    config: MsrConfig,
    readers: BTreeMap<u32, (PathBuf, File)>,
    topology: Vec<StreamId>,
}

impl MsrBackend {
    pub fn open(config: MsrConfig) -> Result<Self, BackendError> {
        let packages = package_readers(&config.sysfs_cpu_root);
        let mut readers = BTreeMap::new();
        for (package, cpu) in packages {
            let path = config.dev_root.join(cpu.to_string()).join("msr");
            let file = File::open(&path).map_err(|e| match e.kind() {
                ErrorKind::PermissionDenied => {
                    BackendError::PermissionDenied { path: path.clone(), hint: PERMISSION_HINT }
                }
                ErrorKind::NotFound => BackendError::Unsupported(format!(
                    "{} does not exist; load the msr kernel module (modprobe msr)",
                    path.display()
                )),
                _ => BackendError::Io { path: path.clone(), source: e },
            })?;
            readers.insert(package, (path, file));
        }

        let mut backend = MsrBackend { config, readers, topology: Vec::new() };
        let packages: Vec<u32> = backend.readers.keys().copied().collect();
        for &package in &packages {
            match backend.read_register(package, MSR_PKG_ENERGY_STATUS) {
                Ok(_) => backend.topology.push(StreamId::new(Domain::Pkg, package)),
                Err(BackendError::CapabilityMissing { .. }) => {
                    return Err(BackendError::Unsupported(format!("no RAPL package counter on package {package}")))
                }
                Err(e) => return Err(e),
            }
        }
        for &package in &packages {
            match backend.read_register(package, MSR_DRAM_ENERGY_STATUS) {
                Ok(_) => backend.topology.push(StreamId::new(Domain::Dram, package)),
                Err(BackendError::CapabilityMissing { .. }) => {}
                Err(e) => return Err(e),
            }
        }
        if backend.topology.is_empty() {
            return Err(BackendError::Unsupported("no RAPL package counter found".into()));
        }
        let raw_unit = backend.read_register(packages[0], MSR_RAPL_POWER_UNIT)?;
        decode_unit(raw_unit, backend.config.unit_field)?;
        Ok(backend)
    }

    fn read_register(&self, package: u32, register: u64) -> Result<u64, BackendError> {
        let (path, file) = self
            .readers
            .get(&package)
            .ok_or(BackendError::InvalidAddress(CounterAddress { register: Register::PowerUnit, package }))?;
        let mut buf = [0u8; 8];
        match file.read_at(&mut buf, register) {
            Ok(8) => Ok(u64::from_le_bytes(buf)),
            // The msr driver answers EIO for registers the CPU does not implement.
            Ok(_) => Err(missing(register, package)),
            Err(e) if e.raw_os_error() == Some(libc::EIO) => Err(missing(register, package)),
            Err(e) => Err(BackendError::Io { path: path.clone(), source: e }),
        }
    }
}

fn missing(register: u64, package: u32) -> BackendError {
    let domain = if register == MSR_DRAM_ENERGY_STATUS { Domain::Dram } else { Domain::Pkg };
    BackendError::CapabilityMissing { domain, package }
}

/// Lowest-numbered CPU of every physical package. Falls back to a single
/// package read through CPU 0 when sysfs topology is unavailable.
fn package_readers(sysfs_cpu_root: &Path) -> BTreeMap<u32, u32> {
    let mut packages = BTreeMap::new();
    if let Ok(entries) = fs::read_dir(sysfs_cpu_root) {
        for entry in entries.flatten() {
            let name = entry.file_name();
            let Some(cpu) = name.to_str().and_then(|n| n.strip_prefix("cpu")).and_then(|n| n.parse::<u32>().ok())
            else {
                continue;
            };
            let Ok(id) = fs::read_to_string(entry.path().join("topology/physical_package_id")) else {
                continue;
            };
            if let Ok(package) = id.trim().parse::<u32>() {
                let slot = packages.entry(package).or_insert(cpu);
                *slot = (*slot).min(cpu);
            }
        }
    }
    if packages.is_empty() {
        packages.insert(0, 0);
    }
    packages
}

impl CounterBackend for MsrBackend {
    fn name(&self) -> &'static str {
        "hardware"
    }

    fn topology(&self) -> &[StreamId] {
        &self.topology
    }

    fn read(&mut self, address: CounterAddress, _at: Duration) -> Result<u64, BackendError> {
        let register = match address.register {
            Register::PowerUnit => MSR_RAPL_POWER_UNIT,
            Register::Energy(domain) => {
                if !self.topology.contains(&StreamId::new(domain, address.package)) {
                    return Err(BackendError::InvalidAddress(address));
                }
                match domain {
                    Domain::Pkg => MSR_PKG_ENERGY_STATUS,
                    Domain::Dram => MSR_DRAM_ENERGY_STATUS,
                }
            }
        };
        self.read_register(address.package, register)
    }

    fn unit_field(&self) -> UnitField {
        self.config.unit_field
    }

    fn energy_unit(&mut self, domain: Domain) -> Result<EnergyUnit, BackendError> {
        if let (Domain::Dram, Some(e)) = (domain, self.config.dram_unit_exponent) {
            return Ok(EnergyUnit::from_exponent(e)?);
        }
        let package = *self.readers.keys().next().expect("opened backend has a package");
        let raw = self.read_register(package, MSR_RAPL_POWER_UNIT)?;
        Ok(decode_unit(raw, self.config.unit_field)?)
    }
}
