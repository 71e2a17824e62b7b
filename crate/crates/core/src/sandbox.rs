//! Starting a container's first process, signalling its process group, and
//! reading the OS process table.
//!
//! Without isolation the container is spawned with `std::process::Command`
//! and made leader of a fresh process group. With namespace isolation it is
//! created by `clone(2)` with new PID, mount and UTS namespaces, so it runs as
//! pid 1 of its own PID namespace and sees a private `/proc`.

use std::collections::HashMap;
use std::ffi::CString;
use std::fs;
use std::io::{self, Read};
use std::os::fd::{AsRawFd, OwnedFd};
use std::os::unix::ffi::OsStrExt;
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};

use nix::errno::Errno;
use nix::sys::wait::{waitpid, WaitStatus};
use nix::unistd::Pid;
use serde::{Deserialize, Serialize};

use crate::error::SandboxError;
use crate::model::{ContainerId, ContainerSpec, ExitReport, ExitStatus, Isolation, ProcessIdentity};
use crate::now_ms;

const DEFAULT_PATH: &str = "/usr/local/sbin:/usr/local/bin:/usr/sbin:/usr/bin:/sbin:/bin";

/// Parsed subset of `/proc/<pid>/stat`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProcStat {
    pub pid: i32,
    pub comm: String,
    pub state: char,
    pub ppid: i32,
    pub pgrp: i32,
    pub utime: u64,
    pub stime: u64,
    pub start_ticks: u64,
    pub rss_pages: u64,
}

/// Parses a stat line. The command name is parenthesised and may itself
/// contain spaces or parentheses, so fields are counted from the last `)`.
pub fn parse_stat(line: &str) -> Option<ProcStat> {
    let open = line.find('(')?;
    let close = line.rfind(')')?;
    let pid = line[..open].trim().parse().ok()?;
    let comm = line[open + 1..close].to_owned();
    let rest: Vec<&str> = line[close + 1..].split_whitespace().collect();
    // rest[0] is field 3 (state).
    let field = |n: usize| rest.get(n - 3).copied();
    Some(ProcStat {
        pid,
        comm,
        state: field(3)?.chars().next()?,
        ppid: field(4)?.parse().ok()?,
        pgrp: field(5)?.parse().ok()?,
        utime: field(14)?.parse().ok()?,
        stime: field(15)?.parse().ok()?,
        start_ticks: field(22)?.parse().ok()?,
        rss_pages: field(24)?.parse().ok()?,
    })
}

pub fn read_stat(pid: i32) -> Option<ProcStat> {
    fs::read_to_string(format!("/proc/{pid}/stat")).ok().as_deref().and_then(parse_stat)
}

/// Identity of a currently existing, non-zombie process.
pub fn identity_of(pid: i32) -> Option<ProcessIdentity> {
    read_stat(pid)
        .filter(|s| !is_dead_state(s.state))
        .map(|s| ProcessIdentity { pid, start_ticks: s.start_ticks })
}

fn is_dead_state(state: char) -> bool {
    matches!(state, 'Z' | 'X' | 'x')
}

/// True iff the pid exists, is not a zombie, and started at the recorded
/// time. A recycled pid fails the start-time check.
pub fn is_alive(identity: &ProcessIdentity) -> bool {
    match read_stat(identity.pid) {
        Some(stat) => stat.start_ticks == identity.start_ticks && !is_dead_state(stat.state),
        None => false,
    }
}

/// Process state letter (`R`, `S`, `T`, ...) if the identity is alive.
pub fn proc_state(identity: &ProcessIdentity) -> Option<char> {
    read_stat(identity.pid)
        .filter(|s| s.start_ticks == identity.start_ticks && !is_dead_state(s.state))
        .map(|s| s.state)
}

pub fn clock_ticks_per_sec() -> u64 {
    // SAFETY: sysconf has no memory-safety preconditions.
    let v = unsafe { libc::sysconf(libc::_SC_CLK_TCK) };
    if v > 0 {
        v as u64
    } else {
        100
    }
}

pub fn page_size() -> u64 {
    // SAFETY: as above.
    let v = unsafe { libc::sysconf(libc::_SC_PAGESIZE) };
    if v > 0 {
        v as u64
    } else {
        4096
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProcRow {
    pub pid: i32,
    pub ppid: i32,
    pub command: String,
    pub state: String,
    /// User plus system time, in clock ticks.
    pub cpu_ticks: u64,
    pub rss_bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProcSample {
    pub rows: Vec<ProcRow>,
    pub sampled_at: u64,
}

/// Snapshot of the live processes in process group `pgid` together with
/// every descendant of the group leader (descendants may have moved to other
/// groups).
pub fn sample_proc(pgid: i32) -> ProcSample {
    let sampled_at = now_ms();
    let mut stats = HashMap::new();
    if let Ok(dir) = fs::read_dir("/proc") {
        for entry in dir.flatten() {
            let Some(pid) = entry.file_name().to_str().and_then(|n| n.parse::<i32>().ok()) else {
                continue;
            };
            if let Some(stat) = read_stat(pid) {
                if !is_dead_state(stat.state) {
                    stats.insert(pid, stat);
                }
            }
        }
    }
    let page = page_size();
    let mut rows: Vec<ProcRow> = stats
        .values()
        .filter(|s| in_tree(&stats, s, pgid))
        .map(|s| ProcRow {
            pid: s.pid,
            ppid: s.ppid,
            command: s.comm.clone(),
            state: s.state.to_string(),
            cpu_ticks: s.utime + s.stime,
            rss_bytes: s.rss_pages * page,
        })
        .collect();
    rows.sort_by_key(|r| r.pid);
    ProcSample { rows, sampled_at }
}

fn in_tree<'a>(stats: &'a HashMap<i32, ProcStat>, mut stat: &'a ProcStat, pgid: i32) -> bool {
    // Bounded walk; pid 1 is its own root.
    for _ in 0..64 {
        if stat.pgrp == pgid || stat.pid == pgid {
            return true;
        }
        match stats.get(&stat.ppid) {
            Some(parent) if parent.pid != stat.pid => stat = parent,
            _ => return false,
        }
    }
    false
}

/// Sends `signal` to every process in group `pgid`. A group that no longer
/// exists is not an error.
pub fn signal_group(pgid: i32, signal: i32) -> Result<(), SandboxError> {
    if pgid <= 1 {
        return Err(SandboxError::Io(io::Error::new(
            io::ErrorKind::InvalidInput,
            format!("refusing to signal process group {pgid}"),
        )));
    }
    match Errno::result(unsafe { libc::killpg(pgid, signal) }) {
        Ok(_) | Err(Errno::ESRCH) => Ok(()),
        Err(Errno::EPERM) => Err(SandboxError::PermissionDenied(pgid)),
        Err(e) => Err(e.into()),
    }
}

/// kill(2) with a raw signal number; nix's `Signal` has no real-time signals.
pub fn send_signal(pid: i32, signal: i32) -> io::Result<()> {
    // SAFETY: plain syscall, no memory involved.
    if unsafe { libc::kill(pid, signal) } == 0 {
        Ok(())
    } else {
        Err(io::Error::last_os_error())
    }
}

/// A spawned container owned by its monitor.
#[derive(Debug)]
pub struct SandboxHandle {
    pub container: ProcessIdentity,
    /// Process group id; equal to the container pid.
    pub pgid: i32,
    pub isolation: Isolation,
    pub stdin: Option<OwnedFd>,
    pub stdout: Option<OwnedFd>,
    pub stderr: Option<OwnedFd>,
}

impl SandboxHandle {
    pub fn signal(&self, signal: i32) -> Result<(), SandboxError> {
        signal_group(self.pgid, signal)
    }

    pub fn wait_exit(&self, id: &ContainerId) -> Result<ExitReport, SandboxError> {
        wait_exit(self.container.pid, id)
    }
}

/// Starts the container described by `spec` with piped stdio.
pub fn spawn(spec: &ContainerSpec) -> Result<SandboxHandle, SandboxError> {
    spec.validate().map_err(|e| SandboxError::Io(io::Error::new(io::ErrorKind::InvalidInput, e.to_string())))?;
    match spec.isolation {
        Isolation::None => spawn_plain(spec),
        Isolation::Namespaces => spawn_isolated(spec),
    }
}

fn container_env(spec: &ContainerSpec) -> Vec<(String, String)> {
    let mut env: Vec<(String, String)> = spec
        .env
        .iter()
        .filter_map(|kv| kv.split_once('=').map(|(k, v)| (k.to_owned(), v.to_owned())))
        .collect();
    if !env.iter().any(|(k, _)| k == "PATH") {
        env.push(("PATH".into(), DEFAULT_PATH.into()));
    }
    env
}

fn spawn_plain(spec: &ContainerSpec) -> Result<SandboxHandle, SandboxError> {
    let mut cmd = Command::new(&spec.command[0]);
    cmd.args(&spec.command[1..])
        .env_clear()
        .envs(container_env(spec))
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped());
    if let Some(dir) = &spec.working_dir {
        cmd.current_dir(dir);
    }
    // SAFETY: setpgid is async-signal-safe.
    unsafe {
        cmd.pre_exec(|| {
            if libc::setpgid(0, 0) != 0 {
                return Err(io::Error::last_os_error());
            }
            Ok(())
        });
    }
    let mut child = cmd.spawn().map_err(|source| SandboxError::ExecFailure {
        program: spec.command[0].clone(),
        source,
    })?;
    let pid = child.id() as i32;
    let container = identity_of(pid).unwrap_or(ProcessIdentity { pid, start_ticks: 0 });
    Ok(SandboxHandle {
        container,
        pgid: pid,
        isolation: Isolation::None,
        stdin: child.stdin.take().map(OwnedFd::from),
        stdout: child.stdout.take().map(OwnedFd::from),
        stderr: child.stderr.take().map(OwnedFd::from),
    })
}

/// Locates `program` the way `execvp` would, using the container's PATH.
fn resolve_program(program: &str, path_var: &str) -> Option<PathBuf> {
    if program.contains('/') {
        return Some(PathBuf::from(program));
    }
    path_var
        .split(':')
        .filter(|d| !d.is_empty())
        .map(|d| Path::new(d).join(program))
        .find(|candidate| is_executable(candidate))
}

fn is_executable(path: &Path) -> bool {
    use std::os::unix::fs::PermissionsExt;
    fs::metadata(path).map(|m| m.is_file() && m.permissions().mode() & 0o111 != 0).unwrap_or(false)
}

// Error-pipe message tags written by the cloned child before `_exit`.
const SETUP_FAILED: u8 = 1;
const EXEC_FAILED: u8 = 2;

fn spawn_isolated(spec: &ContainerSpec) -> Result<SandboxHandle, SandboxError> {
    use nix::sched::{clone, CloneFlags};
    use nix::unistd::pipe2;

    let env = container_env(spec);
    let path_var = env.iter().find(|(k, _)| k == "PATH").map(|(_, v)| v.as_str()).unwrap_or(DEFAULT_PATH);
    let exec_failure = |errno: Errno| SandboxError::ExecFailure {
        program: spec.command[0].clone(),
        source: io::Error::from(errno),
    };
    let program = resolve_program(&spec.command[0], path_var).ok_or_else(|| exec_failure(Errno::ENOENT))?;

    let cstr = |s: &[u8]| CString::new(s).map_err(|_| exec_failure(Errno::EINVAL));
    let c_program = cstr(program.as_os_str().as_bytes())?;
    let c_args = spec.command.iter().map(|a| cstr(a.as_bytes())).collect::<Result<Vec<_>, _>>()?;
    let c_env = env
        .iter()
        .map(|(k, v)| cstr(format!("{k}={v}").as_bytes()))
        .collect::<Result<Vec<_>, _>>()?;
    let c_dir = spec.working_dir.as_ref().map(|d| cstr(d.as_os_str().as_bytes())).transpose()?;
    let mut argv: Vec<*const libc::c_char> = c_args.iter().map(|a| a.as_ptr()).collect();
    argv.push(std::ptr::null());
    let mut envp: Vec<*const libc::c_char> = c_env.iter().map(|a| a.as_ptr()).collect();
    envp.push(std::ptr::null());

    let flags = nix::fcntl::OFlag::O_CLOEXEC;
    let (in_r, in_w) = pipe2(flags)?;
    let (out_r, out_w) = pipe2(flags)?;
    let (err_r, err_w) = pipe2(flags)?;
    let (status_r, status_w) = pipe2(flags)?;

    let fds = [in_r.as_raw_fd(), out_w.as_raw_fd(), err_w.as_raw_fd()];
    let status_fd = status_w.as_raw_fd();
    let mut stack = vec![0u8; 256 * 1024];

    // Runs in the child between clone and execve: raw syscalls only, every
    // buffer prepared above.
    let child_main = Box::new(move || -> isize {
        let report = |tag: u8| -> isize {
            let errno = Errno::last_raw();
            let mut msg = [0u8; 5];
            msg[0] = tag;
            msg[1..].copy_from_slice(&errno.to_be_bytes());
            // SAFETY: writes a stack buffer to an fd we own.
            unsafe {
                libc::write(status_fd, msg.as_ptr().cast(), msg.len());
                libc::_exit(127)
            }
        };
        // SAFETY: plain syscalls on descriptors and C strings owned by the
        // parent's (copied) address space.
        unsafe {
            for (target, fd) in fds.iter().enumerate() {
                if libc::dup2(*fd, target as i32) < 0 {
                    return report(SETUP_FAILED);
                }
            }
            if libc::setsid() < 0 {
                return report(SETUP_FAILED);
            }
            let root = c"/";
            if libc::mount(std::ptr::null(), root.as_ptr(), std::ptr::null(), libc::MS_REC | libc::MS_PRIVATE, std::ptr::null()) != 0 {
                return report(SETUP_FAILED);
            }
            let proc_ = c"proc";
            let proc_dir = c"/proc";
            if libc::mount(
                proc_.as_ptr(),
                proc_dir.as_ptr(),
                proc_.as_ptr(),
                libc::MS_NOSUID | libc::MS_NODEV | libc::MS_NOEXEC,
                std::ptr::null(),
            ) != 0
            {
                return report(SETUP_FAILED);
            }
            if let Some(dir) = &c_dir {
                if libc::chdir(dir.as_ptr()) != 0 {
                    return report(EXEC_FAILED);
                }
            }
            libc::execve(c_program.as_ptr(), argv.as_ptr(), envp.as_ptr());
            report(EXEC_FAILED)
        }
    });

    let clone_flags = CloneFlags::CLONE_NEWPID | CloneFlags::CLONE_NEWNS | CloneFlags::CLONE_NEWUTS;
    // SAFETY: the child only runs the async-signal-safe closure above and
    // never returns into Rust code of the parent.
    let pid = match unsafe { clone(child_main, &mut stack, clone_flags, Some(libc::SIGCHLD)) } {
        Ok(pid) => pid.as_raw(),
        Err(e @ (Errno::EPERM | Errno::EINVAL | Errno::ENOSPC | Errno::EUSERS)) => {
            return Err(SandboxError::IsolationUnsupported(e.desc().to_owned()))
        }
        Err(e) => return Err(e.into()),
    };
    drop((in_r, out_w, err_w, status_w));

    let mut msg = Vec::new();
    fs::File::from(status_r).read_to_end(&mut msg)?;
    if msg.len() == 5 {
        let errno = Errno::from_raw(i32::from_be_bytes([msg[1], msg[2], msg[3], msg[4]]));
        // Reap the failed child so no zombie is left behind.
        let _ = waitpid(Pid::from_raw(pid), None);
        return Err(match msg[0] {
            SETUP_FAILED => SandboxError::IsolationUnsupported(errno.desc().to_owned()),
            _ => exec_failure(errno),
        });
    }

    let container = identity_of(pid).unwrap_or(ProcessIdentity { pid, start_ticks: 0 });
    Ok(SandboxHandle {
        container,
        pgid: pid,
        isolation: Isolation::Namespaces,
        stdin: Some(in_w),
        stdout: Some(out_r),
        stderr: Some(err_r),
    })
}

/// Blocks until `pid` (a child of the caller) exits, reaps it, and maps the
/// wait status to an exit report.
pub fn wait_exit(pid: i32, id: &ContainerId) -> Result<ExitReport, SandboxError> {
    loop {
        match waitpid(Pid::from_raw(pid), None) {
            Ok(WaitStatus::Exited(_, code)) => {
                return Ok(report(id, ExitStatus::Code(code as u8)));
            }
            Ok(WaitStatus::Signaled(_, sig, _)) => {
                return Ok(report(id, ExitStatus::Signal(sig as i32)));
            }
            Ok(_) => continue,
            Err(Errno::EINTR) => continue,
            Err(Errno::ECHILD) => return Err(SandboxError::NotParent(pid)),
            Err(e) => return Err(e.into()),
        }
    }
}

fn report(id: &ContainerId, status: ExitStatus) -> ExitReport {
    ExitReport { container_id: id.clone(), status, finished_at: now_ms() }
}

/// Namespace file descriptors of a running isolated container, used to start
/// extra processes inside it.
#[derive(Debug)]
pub struct NamespaceFds {
    pub pid: OwnedFd,
    pub mnt: OwnedFd,
    pub uts: OwnedFd,
}

impl NamespaceFds {
    pub fn open(pid: i32) -> io::Result<Self> {
        let open = |ns: &str| fs::File::open(format!("/proc/{pid}/ns/{ns}")).map(OwnedFd::from);
        Ok(NamespaceFds { pid: open("pid")?, mnt: open("mnt")?, uts: open("uts")? })
    }
}

/// Configures `cmd` to start inside the container: same process group when
/// not isolated, same namespaces when isolated.
///
/// For an isolated container this switches the *caller's* PID namespace for
/// future children, so only the container's monitor should use it.
pub fn join_container(cmd: &mut Command, handle_pgid: i32, ns: Option<&NamespaceFds>) -> io::Result<()> {
    match ns {
        None => {
            // SAFETY: setpgid is async-signal-safe.
            unsafe {
                cmd.pre_exec(move || {
                    if libc::setpgid(0, handle_pgid) != 0 {
                        return Err(io::Error::last_os_error());
                    }
                    Ok(())
                });
            }
        }
        Some(ns) => {
            nix::sched::setns(&ns.pid, nix::sched::CloneFlags::CLONE_NEWPID)?;
            let mnt = ns.mnt.as_raw_fd();
            let uts = ns.uts.as_raw_fd();
            // SAFETY: setns is a plain syscall; the forked child is
            // single-threaded, as CLONE_NEWNS requires.
            unsafe {
                cmd.pre_exec(move || {
                    if libc::setns(uts, libc::CLONE_NEWUTS) != 0 || libc::setns(mnt, libc::CLONE_NEWNS) != 0 {
                        return Err(io::Error::last_os_error());
                    }
                    Ok(())
                });
            }
        }
    }
    Ok(())
}
