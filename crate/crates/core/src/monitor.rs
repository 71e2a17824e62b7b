//! The per-container monitor.
//!
//! The daemon starts the executable's hidden `__shim` entry point. The shim
//! forks (twice in decoupled mode, calling `setsid` in between), spawns the
//! container, and then execs the same executable as `__monitor`, handing over
//! the container's pid and stdio pipes. The monitor:
//!
//! 1. reports `Launched` to the daemon socket,
//! 2. in decoupled mode kills the intermediate parent so it is reparented
//!    away from the daemon,
//! 3. serves `monitor.sock` (attach, exec, wait, logs) and copies container
//!    output into `logs/<id>.log`,
//! 4. on container exit writes `exits/<id>.exit`, then raises the exit
//!    signal at whichever daemon currently owns `daemon.pid`, and exits.
//!
//! It holds nothing from the daemon besides its boot arguments.

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Read, Write};
use std::os::fd::{AsRawFd, FromRawFd, OwnedFd, RawFd};
use std::os::unix::net::{UnixListener, UnixStream};
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{mpsc, Arc, Condvar, Mutex, MutexGuard};
use std::thread;
use std::time::{Duration, Instant};

use log::{debug, error, info, warn};
use nix::sys::signal::{kill, Signal};
use nix::unistd::{fork, getpid, getppid, ForkResult, Pid};
use serde::{Deserialize, Serialize};

use crate::client::DaemonClient;
use crate::model::{ContainerId, ContainerSpec, ExitReport, ExitStatus, Isolation, ProcessIdentity, SupervisionMode};
use crate::now_ms;
use crate::protocol::{
    codes, encode_frame, read_daemon_identity, read_frame, restrict_socket, write_exit_report, write_frame, Frame,
    MonitorRequest, Request, Response, SignalPlan, StateDirLayout, StreamTag, WaitReply,
};
use crate::sandbox::{self, NamespaceFds};

pub const SHIM_SUBCOMMAND: &str = "__shim";
pub const MONITOR_SUBCOMMAND: &str = "__monitor";

/// Default cap on concurrent monitor-socket connections.
pub const MAX_CONNECTIONS: usize = 16;

/// Everything a monitor needs, passed on its command line.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MonitorBootArgs {
    pub container_id: ContainerId,
    pub state_dir: PathBuf,
    pub mode: SupervisionMode,
    pub spec: ContainerSpec,
    /// Daemon that launched us; kept for diagnostics. Exit notification
    /// targets whatever `daemon.pid` says at exit time.
    pub daemon: Option<ProcessIdentity>,
    pub signal_plan: SignalPlan,
    /// Read end of the daemon's lifeline pipe (coupled mode only).
    #[serde(default)]
    pub lifeline_fd: Option<RawFd>,
    #[serde(default)]
    pub max_log_bytes: Option<u64>,
}

/// What the shim hands to the monitor across `exec`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MonitorHandoff {
    pub container: ProcessIdentity,
    pub isolation: Isolation,
    pub stdin_fd: RawFd,
    pub stdout_fd: RawFd,
    pub stderr_fd: RawFd,
    /// The intermediate process to kill once launched (decoupled mode).
    pub intermediate: Option<i32>,
}

/// Dispatches the hidden entry points. Returns `None` when `argv` is not a
/// monitor invocation.
pub fn run_hidden_subcommand(argv: &[String]) -> Option<i32> {
    let sub = argv.get(1)?;
    if sub != SHIM_SUBCOMMAND && sub != MONITOR_SUBCOMMAND {
        return None;
    }
    let parsed = argv
        .get(2)
        .ok_or_else(|| "missing boot arguments".to_owned())
        .and_then(|json| serde_json::from_str::<MonitorBootArgs>(json).map_err(|e| e.to_string()));
    let boot = match parsed {
        Ok(boot) => boot,
        Err(e) => {
            eprintln!("{sub}: {e}");
            return Some(2);
        }
    };
    if sub == SHIM_SUBCOMMAND {
        return Some(shim_main(&boot));
    }
    match argv.get(3).map(|json| serde_json::from_str::<MonitorHandoff>(json)) {
        Some(Ok(handoff)) => Some(monitor_main(boot, handoff)),
        _ => {
            eprintln!("{sub}: missing or malformed handoff");
            Some(2)
        }
    }
}

fn set_cloexec(fd: RawFd, on: bool) -> io::Result<()> {
    use nix::fcntl::{fcntl, FcntlArg, FdFlag};
    // SAFETY: the fd is owned by this process for the duration of the call.
    let borrowed = unsafe { std::os::fd::BorrowedFd::borrow_raw(fd) };
    let flags = if on { FdFlag::FD_CLOEXEC } else { FdFlag::empty() };
    fcntl(borrowed, FcntlArg::F_SETFD(flags))?;
    Ok(())
}

fn report_launch_failure(layout: &StateDirLayout, id: &ContainerId, error: String, errno: Option<i32>) {
    let client = DaemonClient::new(layout.daemon_sock()).with_timeout(Duration::from_secs(5));
    let req = Request::LaunchFailed { id: id.clone(), error, errno };
    if let Err(e) = client.request(&req) {
        warn!("could not report launch failure for {id}: {e}");
    }
}

/// Launch shim. Runs single-threaded in a freshly exec'd process, so `fork`
/// here is unrestricted.
pub fn shim_main(boot: &MonitorBootArgs) -> i32 {
    let layout = match StateDirLayout::new(&boot.state_dir) {
        Ok(l) => l,
        Err(e) => {
            eprintln!("shim: {e}");
            return 2;
        }
    };
    let id = &boot.container_id;

    let mut intermediate = None;
    if boot.mode == SupervisionMode::Decoupled {
        // SAFETY: single-threaded process.
        match unsafe { fork() } {
            Ok(ForkResult::Parent { child }) => {
                // Intermediate: lives until the monitor kills it, or mirrors
                // the child's status if the launch fails.
                return match nix::sys::wait::waitpid(child, None) {
                    Ok(nix::sys::wait::WaitStatus::Exited(_, code)) => code,
                    _ => 1,
                };
            }
            Ok(ForkResult::Child) => {
                intermediate = Some(getppid().as_raw());
                if let Err(e) = nix::unistd::setsid() {
                    report_launch_failure(&layout, id, format!("setsid: {e}"), Some(e as i32));
                    return 1;
                }
            }
            Err(e) => {
                report_launch_failure(&layout, id, format!("fork: {e}"), Some(e as i32));
                return 1;
            }
        }
    } else {
        // Own process group so terminal signals aimed at the daemon's group
        // do not reach monitors.
        let _ = nix::unistd::setpgid(Pid::from_raw(0), Pid::from_raw(0));
    }

    if let Some(fd) = boot.lifeline_fd {
        let _ = set_cloexec(fd, true);
    }

    let handle = match sandbox::spawn(&boot.spec) {
        Ok(h) => h,
        Err(e) => {
            let errno = e.raw_os_error();
            report_launch_failure(&layout, id, e.to_string(), errno);
            return 1;
        }
    };

    let (Some(stdin), Some(stdout), Some(stderr)) = (handle.stdin, handle.stdout, handle.stderr) else {
        let _ = sandbox::signal_group(handle.pgid, libc::SIGKILL);
        report_launch_failure(&layout, id, "container stdio missing".into(), None);
        return 1;
    };
    let handoff = MonitorHandoff {
        container: handle.container,
        isolation: handle.isolation,
        stdin_fd: stdin.as_raw_fd(),
        stdout_fd: stdout.as_raw_fd(),
        stderr_fd: stderr.as_raw_fd(),
        intermediate,
    };
    let mut inherit = vec![handoff.stdin_fd, handoff.stdout_fd, handoff.stderr_fd];
    inherit.extend(boot.lifeline_fd);
    for fd in inherit {
        let _ = set_cloexec(fd, false);
    }

    let exe = std::env::current_exe().unwrap_or_else(|_| PathBuf::from("/proc/self/exe"));
    let boot_json = serde_json::to_string(boot).expect("boot args serialize");
    let handoff_json = serde_json::to_string(&handoff).expect("handoff serializes");
    let err = Command::new(&exe).arg(MONITOR_SUBCOMMAND).arg(boot_json).arg(handoff_json).exec();

    // exec only returns on failure.
    let _ = sandbox::signal_group(handle.pgid, libc::SIGKILL);
    let _ = sandbox::wait_exit(handle.container.pid, id);
    report_launch_failure(&layout, id, format!("exec monitor {exe:?}: {err}"), err.raw_os_error());
    drop((stdin, stdout, stderr));
    1
}

struct HubState {
    log: Option<File>,
    log_bytes: u64,
    subscribers: Vec<mpsc::Sender<Frame>>,
    exit: Option<ExitReport>,
}

/// Fan-out point for container output: every frame goes to the log file and
/// to each attached client, under one lock so a replay plus subscription
/// never misses or duplicates a frame.
struct Hub {
    log_path: PathBuf,
    max_log_bytes: Option<u64>,
    state: Mutex<HubState>,
    exited: Condvar,
    stdin: Mutex<Option<File>>,
}

impl Hub {
    fn new(log_path: PathBuf, max_log_bytes: Option<u64>, stdin: File) -> io::Result<Self> {
        let log = OpenOptions::new().create(true).append(true).open(&log_path)?;
        let log_bytes = log.metadata()?.len();
        Ok(Hub {
            log_path,
            max_log_bytes,
            state: Mutex::new(HubState { log: Some(log), log_bytes, subscribers: Vec::new(), exit: None }),
            exited: Condvar::new(),
            stdin: Mutex::new(Some(stdin)),
        })
    }

    fn lock(&self) -> MutexGuard<'_, HubState> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn publish(&self, tag: StreamTag, payload: &[u8]) {
        let Ok(bytes) = encode_frame(tag, payload) else { return };
        let mut st = self.lock();
        let room = self.max_log_bytes.is_none_or(|max| st.log_bytes + bytes.len() as u64 <= max);
        if room {
            if let Some(log) = st.log.as_mut() {
                if let Err(e) = log.write_all(&bytes) {
                    warn!("log append failed: {e}");
                } else {
                    st.log_bytes += bytes.len() as u64;
                }
            }
        }
        let frame = Frame::new(tag, payload);
        st.subscribers.retain(|tx| tx.send(frame.clone()).is_ok());
    }

    /// Registers a subscriber. With `replay`, also returns the log so far.
    /// If the container already exited, returns its report instead of
    /// subscribing.
    fn subscribe(&self, replay: bool) -> io::Result<(Vec<u8>, Subscription)> {
        let mut st = self.lock();
        let history = if replay { fs::read(&self.log_path)? } else { Vec::new() };
        if let Some(report) = &st.exit {
            return Ok((history, Err(report.clone())));
        }
        let (tx, rx) = mpsc::channel();
        st.subscribers.push(tx);
        Ok((history, Ok(rx)))
    }

    fn finish(&self, report: ExitReport) {
        let mut st = self.lock();
        let notice = Frame::exit_notice(&report);
        for tx in st.subscribers.drain(..) {
            let _ = tx.send(notice.clone());
        }
        st.exit = Some(report);
        if let Some(log) = st.log.take() {
            let _ = log.sync_all();
        }
        self.exited.notify_all();
        drop(st);
        self.stdin.lock().unwrap_or_else(|p| p.into_inner()).take();
    }

    fn exit_report(&self) -> Option<ExitReport> {
        self.lock().exit.clone()
    }

    fn wait(&self) -> ExitReport {
        let mut st = self.lock();
        loop {
            if let Some(report) = &st.exit {
                return report.clone();
            }
            st = self.exited.wait(st).unwrap_or_else(|p| p.into_inner());
        }
    }

    /// Writes to the container's stdin; an empty payload closes it.
    fn write_stdin(&self, payload: &[u8]) -> io::Result<()> {
        let mut stdin = self.stdin.lock().unwrap_or_else(|p| p.into_inner());
        if payload.is_empty() {
            stdin.take();
            return Ok(());
        }
        match stdin.as_mut() {
            Some(f) => f.write_all(payload),
            None => Err(io::Error::new(io::ErrorKind::BrokenPipe, "container stdin closed")),
        }
    }
}

struct Monitor {
    boot: MonitorBootArgs,
    layout: StateDirLayout,
    container: ProcessIdentity,
    pgid: i32,
    isolation: Isolation,
    hub: Hub,
    active: AtomicUsize,
    aborting: AtomicBool,
    namespaces: Mutex<Option<NamespaceFds>>,
}

/// Connection slot; releases on drop.
struct Slot<'a>(&'a AtomicUsize);

impl Drop for Slot<'_> {
    fn drop(&mut self) {
        self.0.fetch_sub(1, Ordering::SeqCst);
    }
}

fn pump(fd: OwnedFd, tag: StreamTag, monitor: Arc<Monitor>) -> thread::JoinHandle<()> {
    thread::spawn(move || {
        let mut src = File::from(fd);
        let mut buf = vec![0u8; 64 * 1024];
        loop {
            match src.read(&mut buf) {
                Ok(0) => break,
                Ok(n) => monitor.hub.publish(tag, &buf[..n]),
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => {
                    debug!("{tag:?} pump: {e}");
                    break;
                }
            }
        }
    })
}

fn join_with_timeout(handles: Vec<thread::JoinHandle<()>>, timeout: Duration) {
    let deadline = Instant::now() + timeout;
    for h in handles {
        while !h.is_finished() && Instant::now() < deadline {
            thread::sleep(Duration::from_millis(5));
        }
        if h.is_finished() {
            let _ = h.join();
        }
    }
}

fn send_launched(monitor: &Monitor) -> Result<(), String> {
    let me = sandbox::identity_of(getpid().as_raw()).ok_or("cannot read own process identity")?;
    let req = Request::Launched { id: monitor.boot.container_id.clone(), monitor: me, container: monitor.container };
    let client = DaemonClient::new(monitor.layout.daemon_sock()).with_timeout(Duration::from_secs(10));
    let mut last = String::new();
    for attempt in 0..5 {
        match client.request(&req) {
            Ok(r) if r.ok => return Ok(()),
            Ok(r) => return Err(format!("daemon refused launch: {:?} {:?}", r.error, r.message)),
            Err(e) => last = e.to_string(),
        }
        thread::sleep(Duration::from_millis(50 << attempt));
    }
    Err(last)
}

/// Raises the exit signal at the current daemon, if one is alive. The pid
/// file is re-read here so a recycled pid is never signalled.
fn notify_daemon(layout: &StateDirLayout, signal: i32) -> bool {
    let Some(daemon) = read_daemon_identity(layout) else { return false };
    if !sandbox::is_alive(&daemon) {
        return false;
    }
    daemon.pid > 1 && sandbox::send_signal(daemon.pid, signal).is_ok()
}

type Subscription = Result<mpsc::Receiver<Frame>, ExitReport>;

/// The monitor process body. Returns the process exit code.
pub fn monitor_main(boot: MonitorBootArgs, handoff: MonitorHandoff) -> i32 {
    let layout = match StateDirLayout::new(&boot.state_dir) {
        Ok(l) => l,
        Err(e) => {
            error!("monitor: {e}");
            return 2;
        }
    };
    let id = boot.container_id.clone();
    // SAFETY: the shim passed us these descriptors and nothing else owns them.
    let (stdin, stdout, stderr) = unsafe {
        (
            File::from_raw_fd(handoff.stdin_fd),
            OwnedFd::from_raw_fd(handoff.stdout_fd),
            OwnedFd::from_raw_fd(handoff.stderr_fd),
        )
    };
    for fd in [handoff.stdin_fd, handoff.stdout_fd, handoff.stderr_fd] {
        let _ = set_cloexec(fd, true);
    }
    let pgid = handoff.container.pid;
    let abort_container = |why: &str| {
        error!("monitor {id}: {why}; killing container");
        let _ = sandbox::signal_group(pgid, libc::SIGKILL);
        let _ = sandbox::wait_exit(pgid, &id);
        let _ = fs::remove_file(layout.monitor_sock(&id));
        1
    };

    let hub = match Hub::new(layout.log_path(&id), boot.max_log_bytes, stdin) {
        Ok(h) => h,
        Err(e) => return abort_container(&format!("open log: {e}")),
    };
    let sock_path = layout.monitor_sock(&id);
    let _ = fs::create_dir_all(layout.container_dir(&id));
    let _ = fs::remove_file(&sock_path);
    let listener = match UnixListener::bind(&sock_path) {
        Ok(l) => l,
        Err(e) => return abort_container(&format!("bind {sock_path:?}: {e}")),
    };
    let _ = restrict_socket(&sock_path);

    let monitor = Arc::new(Monitor {
        layout: layout.clone(),
        container: handoff.container,
        pgid,
        isolation: handoff.isolation,
        hub,
        active: AtomicUsize::new(0),
        aborting: AtomicBool::new(false),
        namespaces: Mutex::new(None),
        boot,
    });

    let pumps = vec![
        pump(stdout, StreamTag::Stdout, monitor.clone()),
        pump(stderr, StreamTag::Stderr, monitor.clone()),
    ];

    if let Err(e) = send_launched(&monitor) {
        return abort_container(&format!("launch handshake failed: {e}"));
    }

    if let Some(parent) = handoff.intermediate {
        // Only kill the parent we were told about; if it already died we
        // have been reparented and getppid() no longer matches.
        if getppid().as_raw() == parent {
            let _ = kill(Pid::from_raw(parent), Signal::SIGKILL);
        }
    }

    if let Some(fd) = monitor.boot.lifeline_fd {
        let m = monitor.clone();
        thread::spawn(move || watch_lifeline(fd, m));
    }

    {
        let m = monitor.clone();
        thread::spawn(move || accept_loop(listener, m));
    }
    info!("monitor {id} supervising pid {}", monitor.container.pid);

    let report = match sandbox::wait_exit(monitor.container.pid, &id) {
        Ok(r) => r,
        Err(e) => {
            error!("monitor {id}: wait failed: {e}");
            let _ = fs::remove_file(&sock_path);
            return 1;
        }
    };
    // Background children may hold the pipes open; do not wait on them forever.
    join_with_timeout(pumps, Duration::from_millis(500));

    if monitor.aborting.load(Ordering::SeqCst) {
        // Coupled mode, daemon gone: the container is aborted, not exited.
        monitor.hub.finish(report);
        let _ = fs::remove_file(&sock_path);
        drain_connections(&monitor, Duration::from_millis(500));
        return 0;
    }

    let written = write_exit_report(&layout, &report).or_else(|e| {
        warn!("exit file write failed ({e}); retrying");
        thread::sleep(Duration::from_millis(50));
        write_exit_report(&layout, &report)
    });
    if let Err(e) = written {
        error!("monitor {id}: cannot write exit file: {e}");
        monitor.hub.finish(report);
        let _ = fs::remove_file(&sock_path);
        return 1;
    }
    // Exit file is durable before anyone is told.
    let notified = notify_daemon(&layout, monitor.boot.signal_plan.exit_notify);
    debug!("monitor {id}: exit {} (daemon notified: {notified})", report.status);
    monitor.hub.finish(report);
    let _ = fs::remove_file(&sock_path);
    drain_connections(&monitor, Duration::from_secs(1));
    0
}

fn drain_connections(monitor: &Monitor, timeout: Duration) {
    let deadline = Instant::now() + timeout;
    while monitor.active.load(Ordering::SeqCst) > 0 && Instant::now() < deadline {
        thread::sleep(Duration::from_millis(5));
    }
}

fn watch_lifeline(fd: RawFd, monitor: Arc<Monitor>) {
    // SAFETY: inherited descriptor, owned by this thread from here on.
    let mut pipe = unsafe { File::from_raw_fd(fd) };
    let mut buf = [0u8; 16];
    loop {
        match pipe.read(&mut buf) {
            Ok(0) => break,
            Ok(_) => continue,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            Err(_) => break,
        }
    }
    if monitor.hub.exit_report().is_none() {
        warn!("daemon gone; aborting container {}", monitor.boot.container_id);
        monitor.aborting.store(true, Ordering::SeqCst);
        let _ = sandbox::signal_group(monitor.pgid, libc::SIGKILL);
    }
}

fn accept_loop(listener: UnixListener, monitor: Arc<Monitor>) {
    for conn in listener.incoming() {
        let Ok(stream) = conn else { continue };
        let m = monitor.clone();
        let prev = m.active.fetch_add(1, Ordering::SeqCst);
        thread::spawn(move || {
            let _slot = Slot(&m.active);
            if prev >= MAX_CONNECTIONS {
                let mut s = stream;
                let reply = Response::err(codes::TOO_MANY_CONNECTIONS, format!("limit is {MAX_CONNECTIONS}"));
                let _ = s.write_all(reply.to_line().as_bytes());
                return;
            }
            if let Err(e) = serve_connection(stream, &m) {
                debug!("monitor connection: {e}");
            }
        });
    }
}

fn reply(stream: &mut UnixStream, response: &Response) -> io::Result<()> {
    stream.write_all(response.to_line().as_bytes())
}

/// Handles one monitor-socket request.
fn serve_connection(stream: UnixStream, monitor: &Arc<Monitor>) -> io::Result<()> {
    let mut writer = stream.try_clone()?;
    let mut reader = BufReader::new(stream);
    let mut line = String::new();
    reader.read_line(&mut line)?;
    let request: MonitorRequest = match serde_json::from_str(&line) {
        Ok(r) => r,
        Err(e) => {
            let code = match serde_json::from_str::<serde_json::Value>(&line) {
                Ok(v) if v.get("op").is_some() => codes::UNKNOWN_OP,
                _ => codes::BAD_REQUEST,
            };
            return reply(&mut writer, &Response::err(code, e.to_string()));
        }
    };
    match request {
        MonitorRequest::Wait => {
            let report = monitor.hub.wait();
            reply(&mut writer, &Response::with_body(&WaitReply::from_report(&report, false)))
        }
        MonitorRequest::Logs { follow } => {
            if !follow {
                let history = fs::read(&monitor.hub.log_path)?;
                reply(&mut writer, &Response::ok())?;
                return writer.write_all(&history);
            }
            let (history, live) = monitor.hub.subscribe(true)?;
            reply(&mut writer, &Response::ok())?;
            writer.write_all(&history)?;
            stream_live(&mut writer, live)
        }
        MonitorRequest::Attach { stdin, logs } => {
            if monitor.hub.exit_report().is_some() {
                return reply(&mut writer, &Response::err(codes::CONTAINER_NOT_RUNNING, "container has exited"));
            }
            let (history, live) = monitor.hub.subscribe(logs)?;
            reply(&mut writer, &Response::ok())?;
            writer.write_all(&history)?;
            if stdin {
                let m = monitor.clone();
                thread::spawn(move || forward_stdin(reader, |payload| m.hub.write_stdin(payload)));
            }
            stream_live(&mut writer, live)
        }
        MonitorRequest::Exec { argv, env } => serve_exec(reader, writer, monitor, argv, env),
    }
}

fn stream_live(writer: &mut UnixStream, live: Result<mpsc::Receiver<Frame>, ExitReport>) -> io::Result<()> {
    let rx = match live {
        Ok(rx) => rx,
        Err(report) => {
            let notice = Frame::exit_notice(&report);
            return write_frame(writer, notice.tag, &notice.payload).map_err(to_io);
        }
    };
    for frame in rx {
        write_frame(writer, frame.tag, &frame.payload).map_err(to_io)?;
        if frame.tag == StreamTag::ExitNotice {
            break;
        }
    }
    Ok(())
}

fn to_io(e: crate::ProtocolError) -> io::Error {
    match e {
        crate::ProtocolError::Io(e) => e,
        other => io::Error::new(io::ErrorKind::InvalidData, other.to_string()),
    }
}

/// Copies client stdin frames into `sink` until EOF frame or disconnect.
fn forward_stdin<R: Read>(mut reader: R, mut sink: impl FnMut(&[u8]) -> io::Result<()>) {
    loop {
        match read_frame(&mut reader) {
            Ok(Some(frame)) if frame.tag == StreamTag::Stdin => {
                let eof = frame.payload.is_empty();
                if sink(&frame.payload).is_err() || eof {
                    break;
                }
            }
            Ok(Some(_)) => continue,
            Ok(None) | Err(_) => break,
        }
    }
}

fn serve_exec(
    reader: BufReader<UnixStream>,
    mut writer: UnixStream,
    monitor: &Arc<Monitor>,
    argv: Vec<String>,
    env: Vec<String>,
) -> io::Result<()> {
    if monitor.hub.exit_report().is_some() || !sandbox::is_alive(&monitor.container) {
        return reply(&mut writer, &Response::err(codes::CONTAINER_NOT_RUNNING, "container has exited"));
    }
    if argv.is_empty() {
        return reply(&mut writer, &Response::err(codes::BAD_REQUEST, "empty argv"));
    }
    let mut cmd = Command::new(&argv[0]);
    cmd.args(&argv[1..])
        .env_clear()
        .envs(merged_env(&monitor.boot.spec.env, &env))
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped());
    if let Some(dir) = &monitor.boot.spec.working_dir {
        cmd.current_dir(dir);
    }
    let joined = {
        let mut ns = monitor.namespaces.lock().unwrap_or_else(|p| p.into_inner());
        if monitor.isolation == Isolation::Namespaces && ns.is_none() {
            *ns = NamespaceFds::open(monitor.container.pid).ok();
        }
        sandbox::join_container(&mut cmd, monitor.pgid, ns.as_ref())
    };
    if let Err(e) = joined {
        return reply(&mut writer, &Response::err(codes::SPAWN_ERROR, e.to_string()));
    }
    let mut child = match cmd.spawn() {
        Ok(c) => c,
        Err(e) => return reply(&mut writer, &Response::err(codes::SPAWN_ERROR, format!("{}: {e}", argv[0]))),
    };
    reply(&mut writer, &Response::ok())?;

    let (tx, rx) = mpsc::channel::<Frame>();
    let mut pumps = Vec::new();
    for (src, tag) in [
        (child.stdout.take().map(OwnedFd::from), StreamTag::Stdout),
        (child.stderr.take().map(OwnedFd::from), StreamTag::Stderr),
    ] {
        let Some(fd) = src else { continue };
        let tx = tx.clone();
        pumps.push(thread::spawn(move || {
            let mut src = File::from(fd);
            let mut buf = vec![0u8; 64 * 1024];
            while let Ok(n) = src.read(&mut buf) {
                if n == 0 || tx.send(Frame::new(tag, &buf[..n])).is_err() {
                    break;
                }
            }
        }));
    }
    drop(tx);
    if let Some(stdin) = child.stdin.take() {
        let stdin = Mutex::new(Some(stdin));
        thread::spawn(move || {
            forward_stdin(reader, |payload| {
                let mut guard = stdin.lock().unwrap_or_else(|p| p.into_inner());
                if payload.is_empty() {
                    guard.take();
                    return Ok(());
                }
                match guard.as_mut() {
                    Some(s) => s.write_all(payload),
                    None => Err(io::ErrorKind::BrokenPipe.into()),
                }
            })
        });
    }
    let mut write_ok = true;
    for frame in rx {
        if write_ok && write_frame(&mut writer, frame.tag, &frame.payload).is_err() {
            write_ok = false;
        }
    }
    for p in pumps {
        let _ = p.join();
    }
    let status = child.wait()?;
    let status = {
        use std::os::unix::process::ExitStatusExt;
        match (status.code(), status.signal()) {
            (Some(code), _) => ExitStatus::Code(code as u8),
            (None, Some(sig)) => ExitStatus::Signal(sig),
            (None, None) => ExitStatus::Code(255),
        }
    };
    let report = ExitReport { container_id: monitor.boot.container_id.clone(), status, finished_at: now_ms() };
    let notice = Frame::exit_notice(&report);
    write_frame(&mut writer, notice.tag, &notice.payload).map_err(to_io)
}

fn merged_env(base: &[String], extra: &[String]) -> Vec<(String, String)> {
    let mut env: Vec<(String, String)> = Vec::new();
    for kv in base.iter().chain(extra) {
        if let Some((k, v)) = kv.split_once('=') {
            env.retain(|(existing, _)| existing != k);
            env.push((k.to_owned(), v.to_owned()));
        }
    }
    if !env.iter().any(|(k, _)| k == "PATH") {
        env.push(("PATH".into(), "/usr/local/sbin:/usr/local/bin:/usr/sbin:/usr/bin:/sbin:/bin".into()));
    }
    env
}

/// Path of the hidden entry point binary: the running executable.
pub fn default_monitor_exe() -> PathBuf {
    std::env::current_exe().unwrap_or_else(|_| PathBuf::from("/proc/self/exe"))
}

/// Whether `path` could plausibly be the monitor executable.
pub fn monitor_exe_usable(path: &Path) -> bool {
    fs::metadata(path).map(|m| m.is_file()).unwrap_or(false)
}
