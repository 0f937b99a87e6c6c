//! Spawning a workload that waits at a gate until counters are attached.
//!
//! The command is started through a small `/bin/sh` shim that blocks on a
//! pipe, then `exec`s the real program. The shim keeps its pid across that
//! exec, so counters attached to it with enable-on-exec start counting
//! exactly when the workload begins.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, Write};
use std::os::fd::{AsRawFd, FromRawFd, OwnedFd};
use std::os::unix::process::{CommandExt, ExitStatusExt};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, ExitStatus, Stdio};
use std::time::Duration;

const GATE_FD: libc::c_int = 3;
const SHIM: &str = "IFS= read -r _ <&3 || exit 125; exec 3<&-; exec \"$@\"";

#[derive(Debug, Clone, Default)]
pub struct Launch {
    pub argv: Vec<String>,
    pub working_dir: Option<PathBuf>,
    pub env: BTreeMap<String, String>,
    pub stdin: Option<PathBuf>,
    pub stdout: Option<PathBuf>,
    pub stderr: Option<PathBuf>,
    /// Logical cores the workload may run on.
    pub affinity: Option<Vec<usize>>,
}

pub struct GatedChild {
    child: Child,
    gate: Option<File>,
}

#[derive(Debug, Clone, Copy)]
pub struct ExitInfo {
    pub status: ExitStatus,
    /// User plus system CPU time of the process tree, from `wait4`.
    pub cpu_time: Duration,
}

/// Locate `program` the way `execvp` would.
pub fn resolve_program(program: &str, path_var: Option<&str>, working_dir: Option<&Path>) -> Option<PathBuf> {
    use std::os::unix::fs::PermissionsExt;
    let executable = |p: &Path| p.metadata().is_ok_and(|m| m.is_file() && m.permissions().mode() & 0o111 != 0);
    if program.contains('/') {
        let candidate = match working_dir {
            Some(dir) if Path::new(program).is_relative() => dir.join(program),
            _ => PathBuf::from(program),
        };
        return executable(&candidate).then_some(candidate);
    }
    let path_var = path_var.map(str::to_string).or_else(|| std::env::var("PATH").ok()).unwrap_or_default();
    path_var.split(':').filter(|d| !d.is_empty()).map(|d| Path::new(d).join(program)).find(|p| executable(p))
}

fn pipe() -> io::Result<(OwnedFd, OwnedFd)> {
    let mut fds = [0 as libc::c_int; 2];
    // SAFETY: fds is a valid two-element buffer.
    if unsafe { libc::pipe2(fds.as_mut_ptr(), libc::O_CLOEXEC) } != 0 {
        return Err(io::Error::last_os_error());
    }
    // SAFETY: pipe2 succeeded, so both descriptors are open and owned by us.
    Ok(unsafe { (OwnedFd::from_raw_fd(fds[0]), OwnedFd::from_raw_fd(fds[1])) })
}

pub fn spawn_gated(launch: &Launch) -> io::Result<GatedChild> {
    if launch.argv.is_empty() {
        return Err(io::Error::new(io::ErrorKind::InvalidInput, "empty command"));
    }
    let (read_end, write_end) = pipe()?;
    let read_fd = read_end.as_raw_fd();
    let write_fd = write_end.as_raw_fd();

    let mut cmd = Command::new("/bin/sh");
    cmd.arg("-c").arg(SHIM).arg("joulemeter-shim").args(&launch.argv);
    cmd.envs(&launch.env);
    if let Some(dir) = &launch.working_dir {
        cmd.current_dir(dir);
    }
    cmd.stdin(match &launch.stdin {
        Some(p) => Stdio::from(File::open(p)?),
        None => Stdio::null(),
    });
    for (target, path) in [(0, &launch.stdout), (1, &launch.stderr)] {
        let stdio = match path {
            Some(p) => Stdio::from(File::create(p)?),
            None => Stdio::null(),
        };
        if target == 0 {
            cmd.stdout(stdio);
        } else {
            cmd.stderr(stdio);
        }
    }

    let affinity = launch.affinity.clone();
    // SAFETY: the closure only issues async-signal-safe syscalls.
    unsafe {
        cmd.pre_exec(move || {
            if write_fd != GATE_FD {
                libc::close(write_fd);
            }
            if read_fd == GATE_FD {
                if libc::fcntl(GATE_FD, libc::F_SETFD, 0) != 0 {
                    return Err(io::Error::last_os_error());
                }
            } else if libc::dup2(read_fd, GATE_FD) < 0 {
                return Err(io::Error::last_os_error());
            }
            if let Some(cpus) = &affinity {
                let mut set: libc::cpu_set_t = std::mem::zeroed();
                for &cpu in cpus {
                    libc::CPU_SET(cpu, &mut set);
                }
                if libc::sched_setaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &set) != 0 {
                    return Err(io::Error::last_os_error());
                }
            }
            Ok(())
        });
    }
    let child = cmd.spawn()?;
    drop(read_end);
    Ok(GatedChild { child, gate: Some(File::from(write_end)) })
}

impl GatedChild {
    pub fn pid(&self) -> libc::pid_t {
        self.child.id() as libc::pid_t
    }

    /// Let the workload start.
    pub fn release(&mut self) -> io::Result<()> {
        if let Some(mut gate) = self.gate.take() {
            gate.write_all(b"go\n")?;
        }
        Ok(())
    }

    /// Reap the process, collecting its CPU time.
    pub fn wait(mut self) -> io::Result<ExitInfo> {
        // Closing an unreleased gate makes the shim exit with status 125.
        self.gate.take();
        let pid = self.pid();
        let mut status: libc::c_int = 0;
        // SAFETY: rusage is plain data and zero is a valid bit pattern.
        let mut usage: libc::rusage = unsafe { std::mem::zeroed() };
        loop {
            // SAFETY: pid is our unreaped child; the out-pointers are valid.
            let rc = unsafe { libc::wait4(pid, &mut status, 0, &mut usage) };
            if rc == pid {
                break;
            }
            let err = io::Error::last_os_error();
            if err.kind() != io::ErrorKind::Interrupted {
                return Err(err);
            }
        }
        let tv = |t: libc::timeval| Duration::from_secs(t.tv_sec as u64) + Duration::from_micros(t.tv_usec as u64);
        Ok(ExitInfo { status: ExitStatus::from_raw(status), cpu_time: tv(usage.ru_utime) + tv(usage.ru_stime) })
    }
}
