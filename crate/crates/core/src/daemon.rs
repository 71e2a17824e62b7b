//! The engine: registry, API server, launch handshake, exit ingestion,
//! startup reconciliation and the orphan-monitor poller.
//!
//! Runs on a single-threaded tokio runtime, so the daemon's OS thread count
//! does not depend on how many containers it supervises. The only exception
//! is [`SupervisionMode::Coupled`], which deliberately keeps one blocking
//! waiter thread per container to stand in for a conventional engine.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io;
use std::os::fd::{AsRawFd, OwnedFd};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use log::{debug, error, info, warn};
use nix::fcntl::{Flock, FlockArg};
use nix::sys::wait::{waitpid, WaitPidFlag, WaitStatus};
use nix::unistd::Pid;
use serde::Serialize;
use thiserror::Error;
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader};
use tokio::net::{UnixListener, UnixStream};
use tokio::signal::unix::{signal, SignalKind};
use tokio::sync::{oneshot, watch, Notify};

use crate::error::ProtocolError;
use crate::model::{
    ContainerId, ContainerRecord, ContainerSpec, ContainerState, ExitStatus, IdGenerator, ProcessIdentity,
    SupervisionMode,
};
use crate::monitor::{default_monitor_exe, MonitorBootArgs, SHIM_SUBCOMMAND};
use crate::now_ms;
use crate::protocol::{
    codes, encode_frame, encode_pid_line, parse_request, quarantine, read_daemon_identity, read_exit_report,
    read_record, resolve_layout, restrict_socket, scan_exits, write_atomic, write_record, Frame, PsReply, Request,
    Response, RunReply, SignalPlan, SocketReply, StateDirLayout, StatusReply, WaitReply,
};
use crate::sandbox::{self, ProcRow, ProcSample};

pub const DEFAULT_POLL_INTERVAL_MS: u64 = 2000;
pub const MIN_POLL_INTERVAL_MS: u64 = 100;
pub const DEFAULT_HANDSHAKE_TIMEOUT_MS: u64 = 5000;
/// Memory each coupled-mode waiter thread keeps resident, standing in for
/// the per-container bookkeeping of a conventional engine.
pub const DEFAULT_WAITER_BALLAST: usize = 256 * 1024;
/// How long kill waits for the exit report before falling back.
const KILL_SETTLE: Duration = Duration::from_secs(5);
const STATS_WINDOW: Duration = Duration::from_millis(500);

#[derive(Clone, Debug)]
pub struct DaemonConfig {
    pub state_dir: PathBuf,
    pub mode: SupervisionMode,
    pub poll_interval_ms: u64,
    pub signal_plan: SignalPlan,
    pub handshake_timeout_ms: u64,
    /// Seeds container id generation (tests, reproducible benchmarks).
    pub id_seed: Option<u64>,
    /// Executable providing the hidden monitor entry points.
    pub monitor_exe: Option<PathBuf>,
    pub max_log_bytes: Option<u64>,
    pub waiter_ballast: usize,
}

impl DaemonConfig {
    pub fn new(state_dir: impl Into<PathBuf>) -> Self {
        DaemonConfig {
            state_dir: state_dir.into(),
            mode: SupervisionMode::default(),
            poll_interval_ms: DEFAULT_POLL_INTERVAL_MS,
            signal_plan: SignalPlan::default(),
            handshake_timeout_ms: DEFAULT_HANDSHAKE_TIMEOUT_MS,
            id_seed: None,
            monitor_exe: None,
            max_log_bytes: None,
            waiter_ballast: DEFAULT_WAITER_BALLAST,
        }
    }

    pub fn validate(&self) -> Result<(), DaemonError> {
        if self.poll_interval_ms < MIN_POLL_INTERVAL_MS {
            return Err(DaemonError::Config(format!(
                "poll interval {} ms is below the {MIN_POLL_INTERVAL_MS} ms minimum",
                self.poll_interval_ms
            )));
        }
        if !self.state_dir.is_absolute() {
            return Err(DaemonError::Config(format!("state dir {:?} is not absolute", self.state_dir)));
        }
        self.signal_plan.validate()?;
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum DaemonError {
    #[error("a daemon already owns this state directory{}", .0.map(|p| format!(" (pid {})", p.pid)).unwrap_or_default())]
    AlreadyRunning(Option<ProcessIdentity>),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// The container registry, written through to `containers/<id>/record.json`.
#[derive(Debug)]
pub struct Registry {
    layout: StateDirLayout,
    records: BTreeMap<ContainerId, ContainerRecord>,
}

impl Registry {
    pub fn empty(layout: StateDirLayout) -> Self {
        Registry { layout, records: BTreeMap::new() }
    }

    /// Loads every record. Unreadable ones are renamed aside and reported.
    pub fn load(layout: StateDirLayout) -> io::Result<(Self, Vec<PathBuf>)> {
        let mut records = BTreeMap::new();
        let mut quarantined = Vec::new();
        let entries = match fs::read_dir(layout.containers_dir()) {
            Ok(e) => e,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok((Registry { layout, records }, quarantined)),
            Err(e) => return Err(e),
        };
        for entry in entries {
            let entry = entry?;
            let path = entry.path().join("record.json");
            if !path.exists() {
                continue;
            }
            let dir_name = entry.file_name().to_string_lossy().into_owned();
            match read_record(&path) {
                Ok(rec) if rec.id.as_str() == dir_name => {
                    records.insert(rec.id.clone(), rec);
                }
                Ok(_) | Err(_) => {
                    warn!("quarantining unreadable record {path:?}");
                    quarantined.push(quarantine(&path)?);
                }
            }
        }
        Ok((Registry { layout, records }, quarantined))
    }

    pub fn layout(&self) -> &StateDirLayout {
        &self.layout
    }

    pub fn get(&self, id: &ContainerId) -> Option<&ContainerRecord> {
        self.records.get(id)
    }

    pub fn contains(&self, id: &ContainerId) -> bool {
        self.records.contains_key(id)
    }

    pub fn records(&self) -> impl Iterator<Item = &ContainerRecord> {
        self.records.values()
    }

    pub fn ids(&self) -> Vec<ContainerId> {
        self.records.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Persists `record` and then installs it in memory.
    pub fn put(&mut self, record: ContainerRecord) -> Result<(), ProtocolError> {
        write_record(&self.layout, &record)?;
        self.records.insert(record.id.clone(), record);
        Ok(())
    }

    /// Applies `f` to a copy of the record and persists the result. Nothing
    /// changes if `f` fails.
    pub fn update<T>(
        &mut self,
        id: &ContainerId,
        f: impl FnOnce(&mut ContainerRecord) -> Result<T, String>,
    ) -> Result<T, UpdateError> {
        let mut rec = self.records.get(id).cloned().ok_or(UpdateError::NotFound)?;
        let out = f(&mut rec).map_err(UpdateError::Rejected)?;
        self.put(rec).map_err(|e| UpdateError::Io(e.to_string()))?;
        Ok(out)
    }

    /// Deletes the record and every file belonging to the container.
    pub fn remove(&mut self, id: &ContainerId) -> io::Result<Option<ContainerRecord>> {
        let rec = self.records.remove(id);
        for path in [self.layout.exit_path(id), self.layout.log_path(id), self.layout.monitor_log_path(id)] {
            remove_if_present(&path)?;
        }
        match fs::remove_dir_all(self.layout.container_dir(id)) {
            Err(e) if e.kind() != io::ErrorKind::NotFound => return Err(e),
            _ => {}
        }
        Ok(rec)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum UpdateError {
    NotFound,
    Rejected(String),
    Io(String),
}

impl UpdateError {
    fn response(&self) -> Response {
        match self {
            UpdateError::NotFound => Response::err(codes::NOT_FOUND, "no such container"),
            UpdateError::Rejected(m) => Response::err(codes::INVALID_STATE, m.clone()),
            UpdateError::Io(m) => Response::err(codes::IO_ERROR, m.clone()),
        }
    }
}

fn remove_if_present(path: &Path) -> io::Result<()> {
    match fs::remove_file(path) {
        Err(e) if e.kind() != io::ErrorKind::NotFound => Err(e),
        _ => Ok(()),
    }
}

/// What reconciliation decided, per record.
#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct ReconcileOutcome {
    /// Live containers taken over as-is.
    pub adopted: Vec<ContainerId>,
    /// Records moved to `Exited` (from an exit file or as unknown).
    pub exited: Vec<ContainerId>,
    /// Records to launch again (coupled mode).
    pub relaunch: Vec<ContainerId>,
    /// Live records whose container died but whose monitor is still
    /// running; its exit file is expected shortly.
    pub pending_exit: Vec<ContainerId>,
}

fn transition_or_log(rec: &mut ContainerRecord, result: Result<(), crate::ModelError>) {
    if let Err(e) = result {
        warn!("record {}: {e}", rec.id);
    }
}

/// Applies an exit file to a record. Parse failures quarantine the file and
/// mark the record lost (or exit-unknown when `Lost` is not reachable).
fn apply_exit_file(rec: &mut ContainerRecord, path: &Path) {
    match read_exit_report(path) {
        Ok(report) if report.container_id == rec.id => {
            let r = rec.mark_exited(report.status, report.finished_at);
            transition_or_log(rec, r);
        }
        other => {
            if let Err(e) = &other {
                warn!("bad exit file {path:?}: {e}");
            }
            if let Err(e) = quarantine(path) {
                warn!("cannot quarantine {path:?}: {e}");
            }
            let r = if rec.state == ContainerState::Running {
                rec.transition(ContainerState::Lost)
            } else {
                rec.mark_exit_unknown(now_ms())
            };
            transition_or_log(rec, r);
        }
    }
}

/// Rebuilds registry state from disk and the process table. Idempotent.
pub fn reconcile(registry: &mut Registry, mode: SupervisionMode) -> ReconcileOutcome {
    let mut out = ReconcileOutcome::default();
    let layout = registry.layout.clone();
    for id in registry.ids() {
        let Some(rec) = registry.get(&id) else { continue };
        if rec.state.is_exited() {
            continue;
        }
        let mut rec = rec.clone();
        let before = rec.clone();
        let exit_path = layout.exit_path(&id);
        let container_alive = rec.container.as_ref().is_some_and(sandbox::is_alive);
        let monitor_alive = rec.monitor.as_ref().is_some_and(sandbox::is_alive);

        if exit_path.exists() {
            apply_exit_file(&mut rec, &exit_path);
            if rec.state.is_exited() {
                out.exited.push(id.clone());
            }
        } else if mode == SupervisionMode::Coupled && rec.state.is_live() {
            // A conventional engine takes every running container down with
            // it and boots it again.
            if let Some(c) = rec.container.filter(|_| container_alive) {
                kill_group_blocking(c, Duration::from_secs(1));
            }
            out.relaunch.push(id.clone());
        } else if container_alive {
            let stopped = rec.container.as_ref().and_then(sandbox::proc_state) == Some('T');
            let r = match (rec.state, stopped) {
                (ContainerState::Running, true) => rec.transition(ContainerState::Paused),
                (ContainerState::Paused, false) => rec.transition(ContainerState::Running),
                _ => Ok(()),
            };
            transition_or_log(&mut rec, r);
            out.adopted.push(id.clone());
        } else if rec.state == ContainerState::Created {
            rec.launch_error.get_or_insert_with(|| "launch interrupted by daemon restart".into());
            let r = rec.mark_exit_unknown(now_ms());
            transition_or_log(&mut rec, r);
            out.exited.push(id.clone());
        } else if monitor_alive && rec.state.is_live() {
            out.pending_exit.push(id.clone());
        } else if rec.state.is_live() || rec.state == ContainerState::Lost {
            let r = rec.mark_exit_unknown(now_ms());
            transition_or_log(&mut rec, r);
            out.exited.push(id.clone());
        }

        if rec != before {
            if let Err(e) = registry.put(rec) {
                error!("cannot persist record {id}: {e}");
            }
        }
    }
    out
}

/// Scans `exits/` and applies every exit file whose record is not yet
/// exited. Returns the ids that changed.
pub fn ingest_exits(registry: &mut Registry) -> Vec<ContainerId> {
    let layout = registry.layout.clone();
    let (ids, strays) = match scan_exits(&layout) {
        Ok(found) => found,
        Err(e) => {
            warn!("cannot scan exits: {e}");
            return Vec::new();
        }
    };
    for stray in strays {
        warn!("quarantining stray exit file {stray:?}");
        let _ = quarantine(&stray);
    }
    let mut changed = Vec::new();
    for id in ids {
        let path = layout.exit_path(&id);
        let Some(rec) = registry.get(&id) else {
            warn!("exit file for unknown container {id}; quarantining");
            let _ = quarantine(&path);
            continue;
        };
        if rec.state.is_exited() {
            continue;
        }
        let mut rec = rec.clone();
        apply_exit_file(&mut rec, &path);
        match registry.put(rec) {
            Ok(()) => changed.push(id),
            Err(e) => error!("cannot persist record {id}: {e}"),
        }
    }
    changed
}

fn kill_group_blocking(container: ProcessIdentity, timeout: Duration) {
    if sandbox::is_alive(&container) {
        let _ = sandbox::signal_group(container.pid, libc::SIGKILL);
    }
    let deadline = Instant::now() + timeout;
    while sandbox::is_alive(&container) && Instant::now() < deadline {
        std::thread::sleep(Duration::from_millis(5));
    }
}

async fn kill_group(container: ProcessIdentity, timeout: Duration) {
    if sandbox::is_alive(&container) {
        let _ = sandbox::signal_group(container.pid, libc::SIGKILL);
    }
    let deadline = Instant::now() + timeout;
    while sandbox::is_alive(&container) && Instant::now() < deadline {
        tokio::time::sleep(Duration::from_millis(5)).await;
    }
}

#[derive(Debug)]
enum LaunchOutcome {
    Launched,
    Failed(String),
}

struct Shared {
    config: DaemonConfig,
    layout: StateDirLayout,
    me: ProcessIdentity,
    registry: Mutex<Registry>,
    changes: watch::Sender<u64>,
    pending: Mutex<HashMap<ContainerId, oneshot::Sender<LaunchOutcome>>>,
    ids: Mutex<IdGenerator>,
    restore_ms: f64,
    shutdown: Notify,
    lifeline: Option<(OwnedFd, OwnedFd)>,
    monitor_exe: PathBuf,
}

impl Shared {
    fn registry(&self) -> MutexGuard<'_, Registry> {
        self.registry.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn bump(&self) {
        self.changes.send_modify(|n| *n += 1);
    }

    fn record(&self, id: &ContainerId) -> Option<ContainerRecord> {
        self.registry().get(id).cloned()
    }

    fn update<T>(
        &self,
        id: &ContainerId,
        f: impl FnOnce(&mut ContainerRecord) -> Result<T, String>,
    ) -> Result<T, UpdateError> {
        let out = self.registry().update(id, f);
        if out.is_ok() {
            self.bump();
        }
        out
    }

    fn ingest(&self) {
        let changed = ingest_exits(&mut self.registry());
        if !changed.is_empty() {
            debug!("ingested {} exit(s)", changed.len());
            self.bump();
        }
    }

    fn run_reply(&self, rec: &ContainerRecord) -> RunReply {
        RunReply {
            id: rec.id.clone(),
            pid: rec.container.map(|c| c.pid).unwrap_or_default(),
            monitor_pid: rec.monitor.map(|m| m.pid).unwrap_or_default(),
            socket: self.layout.monitor_sock(&rec.id),
        }
    }

    /// Waits until the record is exited (or gone), up to `timeout`.
    async fn wait_exited(&self, id: &ContainerId, timeout: Option<Duration>) -> Option<ContainerRecord> {
        let mut rx = self.changes.subscribe();
        let deadline = timeout.map(|t| tokio::time::Instant::now() + t);
        loop {
            rx.borrow_and_update();
            match self.record(id) {
                Some(rec) if rec.state.is_exited() => return Some(rec),
                None => return None,
                _ => {}
            }
            match deadline {
                Some(d) => {
                    if tokio::time::timeout_at(d, rx.changed()).await.is_err() {
                        return self.record(id).filter(|r| r.state.is_exited());
                    }
                }
                None => {
                    if rx.changed().await.is_err() {
                        return None;
                    }
                }
            }
        }
    }
}

fn exit_code_for_errno(errno: Option<i32>) -> u8 {
    match errno {
        Some(libc::EACCES) | Some(libc::EPERM) | Some(libc::ENOEXEC) => 126,
        _ => 127,
    }
}

fn set_cloexec(fd: &OwnedFd, on: bool) -> io::Result<()> {
    use nix::fcntl::{fcntl, FcntlArg, FdFlag};
    let flags = if on { FdFlag::FD_CLOEXEC } else { FdFlag::empty() };
    fcntl(fd, FcntlArg::F_SETFD(flags))?;
    Ok(())
}

/// Starts the monitor for a record in `Created` and waits for the
/// handshake. The record is updated by the `launched`/`launch_failed`
/// handlers; this only times out and cleans up.
async fn launch(shared: &Arc<Shared>, id: &ContainerId) -> Result<RunReply, Response> {
    let Some(rec) = shared.record(id) else {
        return Err(Response::err(codes::NOT_FOUND, "no such container"));
    };
    let (tx, rx) = oneshot::channel();
    shared.pending.lock().unwrap_or_else(|p| p.into_inner()).insert(id.clone(), tx);

    let boot = MonitorBootArgs {
        container_id: id.clone(),
        state_dir: shared.layout.root().to_owned(),
        mode: shared.config.mode,
        spec: rec.spec.clone(),
        daemon: Some(shared.me),
        signal_plan: shared.config.signal_plan,
        lifeline_fd: shared.lifeline.as_ref().map(|(r, _)| r.as_raw_fd()),
        max_log_bytes: shared.config.max_log_bytes,
    };
    let spawned = spawn_shim(shared, &boot);
    let child = match spawned {
        Ok(child) => child,
        Err(e) => {
            shared.pending.lock().unwrap_or_else(|p| p.into_inner()).remove(id);
            let msg = format!("cannot start monitor: {e}");
            let _ = shared.update(id, |r| {
                r.launch_error = Some(msg.clone());
                r.mark_exit_unknown(now_ms()).map_err(|e| e.to_string())
            });
            return Err(Response::err(codes::SPAWN_ERROR, msg));
        }
    };
    let shim_pid = child.id() as i32;
    if shared.config.mode == SupervisionMode::Coupled {
        spawn_waiter(child, shared.config.waiter_ballast);
    } else {
        // Reaped by the SIGCHLD handler.
        drop(child);
    }

    let timeout = Duration::from_millis(shared.config.handshake_timeout_ms);
    match tokio::time::timeout(timeout, rx).await {
        Ok(Ok(LaunchOutcome::Launched)) => match shared.record(id) {
            Some(rec) => Ok(shared.run_reply(&rec)),
            None => Err(Response::err(codes::NOT_FOUND, "container removed during launch")),
        },
        Ok(Ok(LaunchOutcome::Failed(msg))) => Err(Response::err(codes::SPAWN_ERROR, msg)),
        Ok(Err(_)) | Err(_) => {
            shared.pending.lock().unwrap_or_else(|p| p.into_inner()).remove(id);
            let _ = nix::sys::signal::kill(Pid::from_raw(shim_pid), nix::sys::signal::Signal::SIGKILL);
            let _ = shared.update(id, |r| {
                if r.state != ContainerState::Created {
                    return Ok(());
                }
                r.launch_error = Some(codes::HANDSHAKE_TIMEOUT.into());
                r.mark_exit_unknown(now_ms()).map_err(|e| e.to_string())
            });
            Err(Response::err(codes::HANDSHAKE_TIMEOUT, format!("no launch report within {} ms", timeout.as_millis())))
        }
    }
}

fn spawn_shim(shared: &Shared, boot: &MonitorBootArgs) -> io::Result<Child> {
    let log = OpenOptions::new().create(true).append(true).open(shared.layout.monitor_log_path(&boot.container_id))?;
    let json = serde_json::to_string(boot).map_err(io::Error::other)?;
    Command::new(&shared.monitor_exe)
        .arg(SHIM_SUBCOMMAND)
        .arg(json)
        .stdin(Stdio::null())
        .stdout(Stdio::null())
        .stderr(Stdio::from(log))
        .spawn()
}

/// Coupled mode only: one blocking thread per container, like the waiter
/// threads of a conventional engine.
fn spawn_waiter(mut child: Child, ballast: usize) {
    let spawned = std::thread::Builder::new().name("waiter".into()).spawn(move || {
        let mut held = vec![0u8; ballast];
        for page in held.chunks_mut(4096) {
            page[0] = 1;
        }
        let status = child.wait();
        debug!("monitor {} exited: {status:?}", child.id());
        drop(std::hint::black_box(held));
    });
    if let Err(e) = spawned {
        warn!("cannot start waiter thread: {e}");
    }
}

fn handle_launched(shared: &Shared, id: &ContainerId, monitor: ProcessIdentity, container: ProcessIdentity) -> Response {
    let Some(tx) = shared.pending.lock().unwrap_or_else(|p| p.into_inner()).remove(id) else {
        return Response::err(codes::STALE_LAUNCH, "no launch in progress for this container");
    };
    let updated = shared.update(id, |r| {
        r.transition(ContainerState::Running).map_err(|e| e.to_string())?;
        r.monitor = Some(monitor);
        r.container = Some(container);
        r.started_at = Some(now_ms());
        Ok(())
    });
    match updated {
        Ok(()) => {
            let _ = tx.send(LaunchOutcome::Launched);
            Response::ok()
        }
        Err(e) => {
            let _ = tx.send(LaunchOutcome::Failed(format!("cannot record launch: {e:?}")));
            e.response()
        }
    }
}

fn handle_launch_failed(shared: &Shared, id: &ContainerId, error: String, errno: Option<i32>) -> Response {
    let Some(tx) = shared.pending.lock().unwrap_or_else(|p| p.into_inner()).remove(id) else {
        return Response::err(codes::STALE_LAUNCH, "no launch in progress for this container");
    };
    let _ = shared.update(id, |r| {
        r.launch_error = Some(error.clone());
        r.mark_exited(ExitStatus::Code(exit_code_for_errno(errno)), now_ms()).map_err(|e| e.to_string())
    });
    let _ = tx.send(LaunchOutcome::Failed(error));
    Response::ok()
}

/// Resets a record to `Created` for a fresh launch and clears the previous
/// incarnation's exit file.
fn reincarnate(shared: &Shared, id: &ContainerId, count_restart: bool) -> Result<(), UpdateError> {
    remove_if_present(&shared.layout.exit_path(id)).map_err(|e| UpdateError::Io(e.to_string()))?;
    shared.update(id, |r| {
        r.reincarnate(count_restart);
        Ok(())
    })
}

#[derive(Serialize)]
struct TopReply {
    rows: Vec<ProcRow>,
}

#[derive(Serialize)]
pub struct StatsReply {
    pub pids: usize,
    pub cpu_percent: f64,
    pub rss_bytes: u64,
    pub cpu_ticks: u64,
    pub sampled_at: u64,
}

fn cpu_percent(a: &ProcSample, b: &ProcSample) -> f64 {
    let ticks = |s: &ProcSample| s.rows.iter().map(|r| r.cpu_ticks).sum::<u64>();
    let dt_ms = b.sampled_at.saturating_sub(a.sampled_at).max(1) as f64;
    let dticks = ticks(b).saturating_sub(ticks(a)) as f64;
    dticks / sandbox::clock_ticks_per_sec() as f64 * 1000.0 / dt_ms * 100.0
}

/// Looks up a live record's container identity, or answers with an error.
fn live_container(shared: &Shared, id: &ContainerId) -> Result<(ContainerRecord, ProcessIdentity), Response> {
    let rec = shared.record(id).ok_or_else(|| Response::err(codes::NOT_FOUND, "no such container"))?;
    match rec.container {
        Some(c) if rec.state.is_live() => Ok((rec, c)),
        _ => Err(Response::err(codes::NOT_RUNNING, format!("container is {}", rec.state.name()))),
    }
}

async fn do_kill(shared: &Arc<Shared>, id: &ContainerId) -> Response {
    let Some(rec) = shared.record(id) else { return Response::err(codes::NOT_FOUND, "no such container") };
    match rec.state {
        ContainerState::Exited(_) => return Response::ok(),
        ContainerState::Created => return Response::err(codes::INVALID_STATE, "container is still launching"),
        _ => {}
    }
    let Some(c) = rec.container else { return Response::err(codes::INVALID_STATE, "no container process") };
    if let Err(e) = sandbox::signal_group(c.pid, shared.config.signal_plan.kill) {
        return Response::err(codes::SIGNAL_FAILURE, e.to_string());
    }
    settle_exit(shared, id, c, KILL_SETTLE).await
}

/// Waits for the monitor's exit report; if none arrives but the container
/// is gone, records an unknown exit.
async fn settle_exit(shared: &Arc<Shared>, id: &ContainerId, c: ProcessIdentity, timeout: Duration) -> Response {
    if shared.wait_exited(id, Some(timeout)).await.is_some() {
        return Response::ok();
    }
    shared.ingest();
    if shared.record(id).is_some_and(|r| r.state.is_exited()) {
        return Response::ok();
    }
    if sandbox::is_alive(&c) {
        return Response::err(codes::SIGNAL_FAILURE, "container did not exit");
    }
    match shared.update(id, |r| {
        if r.state.is_exited() {
            return Ok(());
        }
        r.mark_exit_unknown(now_ms()).map_err(|e| e.to_string())
    }) {
        Ok(()) => Response::ok(),
        Err(e) => e.response(),
    }
}

async fn do_stop(shared: &Arc<Shared>, id: &ContainerId, grace_ms: Option<u64>) -> Response {
    let Some(rec) = shared.record(id) else { return Response::err(codes::NOT_FOUND, "no such container") };
    let was_paused = rec.state == ContainerState::Paused;
    match rec.state {
        ContainerState::Exited(_) => return Response::ok(),
        ContainerState::Created => return Response::err(codes::INVALID_STATE, "container is still launching"),
        ContainerState::Lost => return do_kill(shared, id).await,
        _ => {}
    }
    let Some(c) = rec.container else { return Response::err(codes::INVALID_STATE, "no container process") };
    if rec.state != ContainerState::Stopping {
        let marked = shared.update(id, |r| {
            if r.state == ContainerState::Paused {
                r.transition(ContainerState::Running).map_err(|e| e.to_string())?;
            }
            r.transition(ContainerState::Stopping).map_err(|e| e.to_string())
        });
        if let Err(e) = marked {
            return e.response();
        }
    }
    let plan = &shared.config.signal_plan;
    if let Err(e) = sandbox::signal_group(c.pid, plan.stop) {
        return Response::err(codes::SIGNAL_FAILURE, e.to_string());
    }
    if was_paused {
        let _ = sandbox::signal_group(c.pid, plan.unpause);
    }
    let grace = Duration::from_millis(grace_ms.unwrap_or(rec.spec.stop_grace_ms));
    if shared.wait_exited(id, Some(grace)).await.is_some() {
        return Response::ok();
    }
    debug!("container {id} ignored stop for {} ms; killing", grace.as_millis());
    if let Err(e) = sandbox::signal_group(c.pid, plan.kill) {
        return Response::err(codes::SIGNAL_FAILURE, e.to_string());
    }
    settle_exit(shared, id, c, KILL_SETTLE).await
}

fn do_pause(shared: &Shared, id: &ContainerId, pause: bool) -> Response {
    let (from, to, sig) = if pause {
        (ContainerState::Running, ContainerState::Paused, shared.config.signal_plan.pause)
    } else {
        (ContainerState::Paused, ContainerState::Running, shared.config.signal_plan.unpause)
    };
    let Some(rec) = shared.record(id) else { return Response::err(codes::NOT_FOUND, "no such container") };
    if rec.state != from {
        return Response::err(codes::INVALID_STATE, format!("container is {}", rec.state.name()));
    }
    let Some(c) = rec.container else { return Response::err(codes::INVALID_STATE, "no container process") };
    if let Err(e) = sandbox::signal_group(c.pid, sig) {
        return Response::err(codes::SIGNAL_FAILURE, e.to_string());
    }
    match shared.update(id, |r| r.transition(to).map_err(|e| e.to_string())) {
        Ok(()) => Response::ok(),
        Err(e) => e.response(),
    }
}

async fn do_run(shared: &Arc<Shared>, spec: ContainerSpec) -> Response {
    if let Err(e) = spec.validate() {
        return Response::err(codes::BAD_REQUEST, e.to_string());
    }
    let id = {
        let reg = shared.registry();
        let mut ids = shared.ids.lock().unwrap_or_else(|p| p.into_inner());
        let mut id = ids.next_id();
        while reg.contains(&id) || shared.layout.container_dir(&id).exists() {
            id = ids.next_id();
        }
        id
    };
    let rec = ContainerRecord::new(id.clone(), spec, shared.config.mode, now_ms());
    let _ = remove_if_present(&shared.layout.exit_path(&id));
    if let Err(e) = shared.registry().put(rec) {
        return Response::err(codes::IO_ERROR, e.to_string());
    }
    shared.bump();
    reply_launch(shared, &id).await
}

async fn reply_launch(shared: &Arc<Shared>, id: &ContainerId) -> Response {
    match launch(shared, id).await {
        Ok(reply) => Response::with_body(&reply),
        Err(mut resp) => {
            resp.body.insert("id".into(), id.as_str().into());
            resp
        }
    }
}

async fn do_start(shared: &Arc<Shared>, id: &ContainerId) -> Response {
    let Some(rec) = shared.record(id) else { return Response::err(codes::NOT_FOUND, "no such container") };
    if !rec.state.is_exited() {
        return Response::err(codes::INVALID_STATE, format!("container is {}", rec.state.name()));
    }
    if let Err(e) = reincarnate(shared, id, false) {
        return e.response();
    }
    reply_launch(shared, id).await
}

async fn do_restart(shared: &Arc<Shared>, id: &ContainerId) -> Response {
    let Some(rec) = shared.record(id) else { return Response::err(codes::NOT_FOUND, "no such container") };
    if rec.state == ContainerState::Created {
        return Response::err(codes::INVALID_STATE, "container is still launching");
    }
    if !rec.state.is_exited() {
        let stopped = do_stop(shared, id, None).await;
        if !stopped.ok {
            return stopped;
        }
    }
    if let Err(e) = reincarnate(shared, id, true) {
        return e.response();
    }
    reply_launch(shared, id).await
}

async fn do_wait(shared: &Arc<Shared>, id: &ContainerId) -> Response {
    if shared.record(id).is_none() {
        return Response::err(codes::NOT_FOUND, "no such container");
    }
    match shared.wait_exited(id, None).await.and_then(|r| r.exit_report().map(|rep| (rep, r.exit_unknown))) {
        Some((report, unknown)) => Response::with_body(&WaitReply::from_report(&report, unknown)),
        None => Response::err(codes::NOT_FOUND, "container removed while waiting"),
    }
}

fn do_rm(shared: &Shared, id: &ContainerId) -> Response {
    let Some(rec) = shared.record(id) else { return Response::err(codes::NOT_FOUND, "no such container") };
    if rec.state.is_live() || rec.state == ContainerState::Created {
        return Response::err(codes::RM_RUNNING, format!("container is {}; stop it first", rec.state.name()));
    }
    if let Some(c) = rec.container.filter(sandbox::is_alive) {
        let _ = sandbox::signal_group(c.pid, libc::SIGKILL);
    }
    let removed = shared.registry().remove(id);
    shared.bump();
    match removed {
        Ok(_) => Response::ok(),
        Err(e) => Response::err(codes::IO_ERROR, e.to_string()),
    }
}

/// Socket of a supervised container's monitor, if it can serve I/O.
fn monitor_socket(shared: &Shared, id: &ContainerId) -> Result<PathBuf, Response> {
    let rec = shared.record(id).ok_or_else(|| Response::err(codes::NOT_FOUND, "no such container"))?;
    let monitor_alive = rec.monitor.as_ref().is_some_and(sandbox::is_alive);
    if !rec.state.is_live() || !monitor_alive {
        return Err(Response::err(codes::NOT_RUNNING, format!("container is {}", rec.state.name())));
    }
    Ok(shared.layout.monitor_sock(id))
}

async fn write_response<W: AsyncWriteExt + Unpin>(w: &mut W, resp: &Response) -> io::Result<()> {
    w.write_all(resp.to_line().as_bytes()).await
}

async fn handle_connection(shared: Arc<Shared>, stream: UnixStream) -> io::Result<()> {
    let (read, mut write) = stream.into_split();
    let mut lines = BufReader::new(read).lines();
    let Some(line) = lines.next_line().await? else { return Ok(()) };
    let request = match parse_request(&line) {
        Ok(r) => r,
        Err(resp) => return write_response(&mut write, &resp).await,
    };
    let resp = match request {
        Request::Ps => Response::with_body(&PsReply { containers: shared.registry().records().cloned().collect() }),
        Request::Status => {
            let reg = shared.registry();
            let running = reg.records().filter(|r| r.state.is_live()).count();
            Response::with_body(&StatusReply {
                pid: shared.me.pid,
                mode: shared.config.mode,
                restore_ms: shared.restore_ms,
                containers: reg.len(),
                running,
            })
        }
        Request::Run { spec } => do_run(&shared, spec).await,
        Request::Start { id } => do_start(&shared, &id).await,
        Request::Restart { id } => do_restart(&shared, &id).await,
        Request::Stop { id, grace_ms } => do_stop(&shared, &id, grace_ms).await,
        Request::Kill { id } => do_kill(&shared, &id).await,
        Request::Pause { id } => do_pause(&shared, &id, true),
        Request::Unpause { id } => do_pause(&shared, &id, false),
        Request::Wait { id } => do_wait(&shared, &id).await,
        Request::Rm { id } => do_rm(&shared, &id),
        Request::Top { id } => match live_container(&shared, &id) {
            Ok((_, c)) => Response::with_body(&TopReply { rows: sandbox::sample_proc(c.pid).rows }),
            Err(resp) => resp,
        },
        Request::Stats { id } => match live_container(&shared, &id) {
            Ok((_, c)) => {
                let first = sandbox::sample_proc(c.pid);
                tokio::time::sleep(STATS_WINDOW).await;
                let second = sandbox::sample_proc(c.pid);
                Response::with_body(&StatsReply {
                    pids: second.rows.len(),
                    cpu_percent: cpu_percent(&first, &second),
                    rss_bytes: second.rows.iter().map(|r| r.rss_bytes).sum(),
                    cpu_ticks: second.rows.iter().map(|r| r.cpu_ticks).sum(),
                    sampled_at: second.sampled_at,
                })
            }
            Err(resp) => resp,
        },
        Request::Attach { id } | Request::Exec { id } => match monitor_socket(&shared, &id) {
            Ok(socket) => Response::with_body(&SocketReply { socket }),
            Err(resp) => resp,
        },
        Request::Logs { id } => {
            if let Ok(socket) = monitor_socket(&shared, &id) {
                Response::with_body(&SocketReply { socket })
            } else if let Some(rec) = shared.record(&id) {
                // Monitor gone: serve the log file ourselves.
                let log = match fs::read(shared.layout.log_path(&id)) {
                    Ok(bytes) => bytes,
                    Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
                    Err(e) => return write_response(&mut write, &Response::err(codes::IO_ERROR, e.to_string())).await,
                };
                write_response(&mut write, &Response::ok()).await?;
                write.write_all(&log).await?;
                if let Some(report) = rec.exit_report() {
                    let notice = Frame::exit_notice(&report);
                    if let Ok(bytes) = encode_frame(notice.tag, &notice.payload) {
                        write.write_all(&bytes).await?;
                    }
                }
                return write.shutdown().await;
            } else {
                Response::err(codes::NOT_FOUND, "no such container")
            }
        }
        Request::Shutdown => {
            shared.shutdown.notify_one();
            Response::ok()
        }
        Request::Launched { id, monitor, container } => handle_launched(&shared, &id, monitor, container),
        Request::LaunchFailed { id, error, errno } => handle_launch_failed(&shared, &id, error, errno),
    };
    write_response(&mut write, &resp).await
}

/// Relaunches (or gives up on) a container whose monitor died.
async fn recover(shared: Arc<Shared>, id: ContainerId, container: Option<ProcessIdentity>, count_restart: bool) {
    if let Some(c) = container {
        kill_group(c, Duration::from_secs(2)).await;
    }
    let Some(rec) = shared.record(&id) else { return };
    if rec.state.is_exited() {
        return;
    }
    if !rec.spec.restart_on_monitor_loss && count_restart {
        info!("container {id} lost its monitor; not restarting");
        let _ = shared.update(&id, |r| r.mark_exit_unknown(now_ms()).map_err(|e| e.to_string()));
        return;
    }
    if let Err(e) = reincarnate(&shared, &id, count_restart) {
        error!("cannot reset {id} for relaunch: {e:?}");
        return;
    }
    match launch(&shared, &id).await {
        Ok(r) => info!("container {id} relaunched as pid {}", r.pid),
        Err(resp) => {
            warn!("relaunch of {id} failed: {:?} {:?}", resp.error, resp.message);
            let _ = shared.update(&id, |r| {
                if r.state.is_exited() || r.state == ContainerState::Lost {
                    return Ok(());
                }
                r.transition(ContainerState::Lost).map_err(|e| e.to_string())
            });
        }
    }
}

/// One poller pass: finds live records whose monitor is gone.
fn poll_orphans(shared: &Arc<Shared>) {
    shared.ingest();
    let candidates: Vec<ContainerRecord> = shared
        .registry()
        .records()
        .filter(|r| r.state.is_live())
        .cloned()
        .collect();
    for rec in candidates {
        let monitor_alive = rec.monitor.as_ref().is_some_and(sandbox::is_alive);
        if monitor_alive {
            continue;
        }
        let container_alive = rec.container.as_ref().is_some_and(sandbox::is_alive);
        if container_alive {
            warn!("container {} lost its monitor", rec.id);
            // Claim the record so the next tick does not act on it again.
            let claimed = shared.update(&rec.id, |r| {
                if r.monitor != rec.monitor || !r.state.is_live() {
                    return Err("record changed".into());
                }
                r.monitor = None;
                Ok(())
            });
            if claimed.is_ok() {
                tokio::spawn(recover(shared.clone(), rec.id.clone(), rec.container, true));
            }
        } else if rec.monitor.is_some() || rec.container.is_some() {
            if shared.layout.exit_path(&rec.id).exists() {
                continue;
            }
            warn!("container {} and its monitor vanished without an exit report", rec.id);
            let _ = shared.update(&rec.id, |r| {
                if r.state.is_exited() {
                    return Ok(());
                }
                r.mark_exit_unknown(now_ms()).map_err(|e| e.to_string())
            });
        }
    }
}

fn reap_children() {
    loop {
        match waitpid(Pid::from_raw(-1), Some(WaitPidFlag::WNOHANG)) {
            Ok(WaitStatus::StillAlive) | Err(_) => break,
            Ok(status) => debug!("reaped {status:?}"),
        }
    }
}

fn acquire_lock(layout: &StateDirLayout) -> Result<Flock<File>, DaemonError> {
    let file = OpenOptions::new().create(true).truncate(false).write(true).open(layout.lock_file())?;
    Flock::lock(file, FlockArg::LockExclusiveNonblock).map_err(|(_, errno)| {
        if errno == nix::errno::Errno::EWOULDBLOCK {
            DaemonError::AlreadyRunning(read_daemon_identity(layout))
        } else {
            DaemonError::Io(errno.into())
        }
    })
}

/// Runs the daemon until shutdown. Blocks the calling thread.
pub fn serve(config: DaemonConfig) -> Result<(), DaemonError> {
    config.validate()?;
    let rt = tokio::runtime::Builder::new_current_thread().enable_all().build()?;
    rt.block_on(run(config))
}

async fn run(config: DaemonConfig) -> Result<(), DaemonError> {
    let layout = resolve_layout(&config.state_dir)?;
    let started = Instant::now();
    let _lock = acquire_lock(&layout)?;
    let lock_at = Instant::now();

    let (mut registry, quarantined) = Registry::load(layout.clone())?;
    if !quarantined.is_empty() {
        warn!("quarantined {} corrupt record(s)", quarantined.len());
    }
    let outcome = reconcile(&mut registry, config.mode);
    ingest_exits(&mut registry);
    let restore = lock_at.elapsed();
    info!(
        "restored {} record(s) in {:.3} ms: {} adopted, {} exited, {} to relaunch",
        registry.len(),
        restore.as_secs_f64() * 1000.0,
        outcome.adopted.len(),
        outcome.exited.len(),
        outcome.relaunch.len()
    );

    // Signal handlers go in before daemon.pid names us as the exit target.
    let mut exit_sig = signal(SignalKind::from_raw(config.signal_plan.exit_notify))?;
    let mut chld = signal(SignalKind::child())?;
    let mut term = signal(SignalKind::terminate())?;
    let mut int = signal(SignalKind::interrupt())?;

    let sock = layout.daemon_sock();
    remove_if_present(&sock)?;
    let listener = UnixListener::bind(&sock)?;
    restrict_socket(&sock)?;

    let lifeline = if config.mode == SupervisionMode::Coupled {
        let (r, w) = nix::unistd::pipe2(nix::fcntl::OFlag::O_CLOEXEC).map_err(io::Error::from)?;
        set_cloexec(&r, false)?;
        Some((r, w))
    } else {
        None
    };

    let me = sandbox::identity_of(std::process::id() as i32)
        .ok_or_else(|| io::Error::other("cannot read own process identity"))?;
    write_atomic(&layout.daemon_pid(), encode_pid_line(&me).as_bytes())?;

    let monitor_exe = config.monitor_exe.clone().unwrap_or_else(default_monitor_exe);
    let (changes, _) = watch::channel(0u64);
    let shared = Arc::new(Shared {
        ids: Mutex::new(IdGenerator::new(config.id_seed)),
        restore_ms: restore.as_secs_f64() * 1000.0,
        registry: Mutex::new(registry),
        changes,
        pending: Mutex::new(HashMap::new()),
        shutdown: Notify::new(),
        lifeline,
        monitor_exe,
        layout: layout.clone(),
        me,
        config,
    });
    info!(
        "daemon {} serving {:?} in {} mode (startup {:.1} ms)",
        me.pid,
        sock,
        shared.config.mode.as_str(),
        started.elapsed().as_secs_f64() * 1000.0
    );

    for id in outcome.relaunch {
        tokio::spawn(recover(shared.clone(), id, None, false));
    }

    let reap = shared.config.mode != SupervisionMode::Coupled;
    let mut tick = tokio::time::interval(Duration::from_millis(shared.config.poll_interval_ms));
    tick.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    loop {
        tokio::select! {
            _ = exit_sig.recv() => shared.ingest(),
            _ = chld.recv() => if reap { reap_children() },
            _ = tick.tick() => poll_orphans(&shared),
            _ = term.recv() => break,
            _ = int.recv() => break,
            _ = shared.shutdown.notified() => break,
            accepted = listener.accept() => match accepted {
                Ok((stream, _)) => {
                    let s = shared.clone();
                    tokio::spawn(async move {
                        if let Err(e) = handle_connection(s, stream).await {
                            debug!("connection: {e}");
                        }
                    });
                }
                Err(e) => warn!("accept: {e}"),
            },
        }
    }

    info!("daemon shutting down");
    let _ = fs::remove_file(&sock);
    if read_daemon_identity(&layout) == Some(me) {
        let _ = fs::remove_file(layout.daemon_pid());
    }
    Ok(())
}
