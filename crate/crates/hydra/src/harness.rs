//! Desk-scale experiments: daemon restart, upgrade outage, spawn latency
//! and scalability, each run across supervision modes.
//!
//! Every experiment drives real daemons (the `hydra` executable) in fresh
//! state directories and talks to them over their sockets. Results are
//! rows of `(experiment, mode, trial, metric, value, unit)`, written as CSV.

use std::fs::{self, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::os::unix::net::{UnixListener, UnixStream};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use hydra_core::client::DaemonClient;
use hydra_core::model::{ContainerId, ContainerRecord, ContainerSpec, ContainerState, ProcessIdentity};
use hydra_core::protocol::{read_record, StateDirLayout};
use hydra_core::sandbox;
use hydra_core::SupervisionMode;
use serde::Serialize;

/// Paths and knobs shared by all experiments.
#[derive(Clone, Debug)]
pub struct HarnessConfig {
    pub hydra_exe: PathBuf,
    /// Provides the `responder` workload.
    pub bench_exe: PathBuf,
    pub out_dir: PathBuf,
    pub poll_interval_ms: u64,
    pub seed: Option<u64>,
}

impl HarnessConfig {
    pub fn new(hydra_exe: impl Into<PathBuf>, bench_exe: impl Into<PathBuf>) -> Self {
        HarnessConfig {
            hydra_exe: hydra_exe.into(),
            bench_exe: bench_exe.into(),
            out_dir: PathBuf::from("bench-out"),
            poll_interval_ms: hydra_core::daemon::DEFAULT_POLL_INTERVAL_MS,
            seed: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Row {
    pub experiment: String,
    pub mode: String,
    pub trial: u32,
    pub metric: String,
    pub value: f64,
    pub unit: String,
}

#[derive(Clone, Debug, Default)]
pub struct ExperimentReport {
    pub name: String,
    pub rows: Vec<Row>,
    pub csv_path: Option<PathBuf>,
}

impl ExperimentReport {
    pub fn new(name: &str) -> Self {
        ExperimentReport { name: name.into(), ..Default::default() }
    }

    pub fn push(&mut self, mode: &str, trial: u32, metric: &str, value: f64, unit: &str) {
        self.rows.push(Row {
            experiment: self.name.clone(),
            mode: mode.into(),
            trial,
            metric: metric.into(),
            value,
            unit: unit.into(),
        });
    }

    pub fn values(&self, mode: &str, metric: &str) -> Vec<f64> {
        self.rows.iter().filter(|r| r.mode == mode && r.metric == metric).map(|r| r.value).collect()
    }

    pub fn median(&self, mode: &str, metric: &str) -> Option<f64> {
        percentile(&self.values(mode, metric), 50.0)
    }

    pub fn p95(&self, mode: &str, metric: &str) -> Option<f64> {
        percentile(&self.values(mode, metric), 95.0)
    }

    /// Writes `<dir>/<name>.csv` and remembers the path.
    pub fn write_csv(&mut self, dir: &Path) -> io::Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let path = dir.join(format!("{}.csv", self.name));
        let mut w = csv::Writer::from_path(&path)?;
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        self.csv_path = Some(path.clone());
        Ok(path)
    }

    /// One line per (mode, metric): count, median, p95.
    pub fn summary(&self) -> String {
        let mut keys: Vec<(&str, &str, &str)> = Vec::new();
        for r in &self.rows {
            let k = (r.mode.as_str(), r.metric.as_str(), r.unit.as_str());
            if !keys.contains(&k) {
                keys.push(k);
            }
        }
        let mut out = format!("{}\n{:<10} {:<22} {:>5} {:>12} {:>12}\n", self.name, "mode", "metric", "n", "median", "p95");
        for (mode, metric, unit) in keys {
            let v = self.values(mode, metric);
            out.push_str(&format!(
                "{:<10} {:<22} {:>5} {:>12.3} {:>12.3} {unit}\n",
                mode,
                metric,
                v.len(),
                percentile(&v, 50.0).unwrap_or(f64::NAN),
                percentile(&v, 95.0).unwrap_or(f64::NAN)
            ));
        }
        out
    }
}

/// Linear-interpolated percentile; `None` for no data.
pub fn percentile(values: &[f64], p: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = (p / 100.0).clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    Some(v[lo] + (v[hi] - v[lo]) * (rank - lo as f64))
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1000.0
}

fn poll_until<T>(timeout: Duration, step: Duration, mut f: impl FnMut() -> Option<T>) -> Option<T> {
    let deadline = Instant::now() + timeout;
    loop {
        if let Some(v) = f() {
            return Some(v);
        }
        if Instant::now() >= deadline {
            return None;
        }
        thread::sleep(step);
    }
}

/// A daemon run as a child process of the harness.
pub struct DaemonProc {
    exe: PathBuf,
    pub layout: StateDirLayout,
    pub mode: SupervisionMode,
    poll_interval_ms: u64,
    seed: Option<u64>,
    child: Option<Child>,
}

impl DaemonProc {
    pub fn start(
        exe: &Path,
        state_dir: &Path,
        mode: SupervisionMode,
        poll_interval_ms: u64,
        seed: Option<u64>,
    ) -> io::Result<Self> {
        let layout = StateDirLayout::new(state_dir).map_err(io::Error::other)?;
        let mut d = DaemonProc { exe: exe.to_owned(), layout, mode, poll_interval_ms, seed, child: None };
        d.spawn()?;
        Ok(d)
    }

    fn spawn(&mut self) -> io::Result<()> {
        fs::create_dir_all(self.layout.root())?;
        let log = OpenOptions::new().create(true).append(true).open(self.layout.root().join("daemon.log"))?;
        let mut cmd = Command::new(&self.exe);
        cmd.arg("--state-dir")
            .arg(self.layout.root())
            .args(["daemon", "start", "--foreground", "--mode", self.mode.as_str()])
            .arg("--poll-interval-ms")
            .arg(self.poll_interval_ms.to_string())
            .stdin(Stdio::null())
            .stdout(Stdio::from(log.try_clone()?))
            .stderr(Stdio::from(log));
        if let Some(seed) = self.seed {
            cmd.arg("--seed").arg(seed.to_string());
        }
        let mut child = cmd.spawn()?;
        let client = self.client();
        let up = poll_until(Duration::from_secs(10), Duration::from_millis(2), || {
            if let Ok(Some(st)) = child.try_wait() {
                return Some(Err(io::Error::other(format!("daemon exited during startup: {st}"))));
            }
            client.status().ok().map(|_| Ok(()))
        });
        match up {
            Some(Ok(())) => {
                self.child = Some(child);
                Ok(())
            }
            Some(Err(e)) => Err(e),
            None => {
                let _ = child.kill();
                let _ = child.wait();
                Err(io::Error::other("daemon did not answer within 10 s"))
            }
        }
    }

    pub fn client(&self) -> DaemonClient {
        DaemonClient::new(self.layout.daemon_sock()).with_timeout(Duration::from_secs(30))
    }

    pub fn pid(&self) -> Option<i32> {
        self.child.as_ref().map(|c| c.id() as i32)
    }

    /// SIGKILL, as in a crash.
    pub fn crash(&mut self) -> io::Result<()> {
        if let Some(mut c) = self.child.take() {
            c.kill()?;
            c.wait()?;
        }
        Ok(())
    }

    /// Orderly shutdown through the API.
    pub fn shutdown(&mut self) -> io::Result<()> {
        if let Some(mut c) = self.child.take() {
            if self.client().call_ok(&hydra_core::protocol::Request::Shutdown).is_err() {
                c.kill()?;
            }
            c.wait()?;
        }
        Ok(())
    }

    /// Starts the daemon again on the same state directory.
    pub fn restart(&mut self) -> io::Result<()> {
        if self.child.is_some() {
            return Err(io::Error::other("daemon still running"));
        }
        self.spawn()
    }

    pub fn records(&self) -> Vec<ContainerRecord> {
        self.client().ps().map(|ps| ps.containers).unwrap_or_default()
    }

    /// Resident set size and OS thread count of the daemon process.
    pub fn rss_and_threads(&self) -> Option<(u64, u64)> {
        proc_status(self.pid()?)
    }

    /// Kills every container recorded in the state directory and stops the
    /// daemon.
    pub fn teardown(mut self) {
        self.kill_containers();
        let _ = self.shutdown();
    }

    fn kill_containers(&self) {
        let Ok(entries) = fs::read_dir(self.layout.containers_dir()) else { return };
        for entry in entries.flatten() {
            let Ok(rec) = read_record(&entry.path().join("record.json")) else { continue };
            if let Some(c) = rec.container.filter(sandbox::is_alive) {
                let _ = sandbox::signal_group(c.pid, libc::SIGKILL);
            }
        }
    }
}

impl Drop for DaemonProc {
    fn drop(&mut self) {
        if let Some(mut c) = self.child.take() {
            self.kill_containers();
            let _ = c.kill();
            let _ = c.wait();
        }
    }
}

/// `(VmRSS bytes, Threads)` from `/proc/<pid>/status`.
pub fn proc_status(pid: i32) -> Option<(u64, u64)> {
    let text = fs::read_to_string(format!("/proc/{pid}/status")).ok()?;
    let field = |name: &str| -> Option<u64> {
        let line = text.lines().find(|l| l.starts_with(name))?;
        line.split_whitespace().nth(1)?.parse().ok()
    };
    Some((field("VmRSS:")? * 1024, field("Threads:")?))
}

pub fn sleeper_spec() -> ContainerSpec {
    ContainerSpec::new(["sleep", "1000000"])
}

/// Container identities of all live records, by id.
pub fn live_identities(records: &[ContainerRecord]) -> Vec<(ContainerId, ProcessIdentity)> {
    records
        .iter()
        .filter(|r| r.state.is_live())
        .filter_map(|r| r.container.map(|c| (r.id.clone(), c)))
        .collect()
}

/// Launches `n` sleepers and returns their ids.
pub fn launch_sleepers(d: &DaemonProc, n: usize) -> io::Result<Vec<ContainerId>> {
    let client = d.client();
    (0..n)
        .map(|_| client.run(sleeper_spec()).map(|r| r.id).map_err(io::Error::other))
        .collect()
}

/// Waits until every id is Running with a live container.
pub fn wait_all_running(d: &DaemonProc, ids: &[ContainerId], timeout: Duration) -> bool {
    poll_until(timeout, Duration::from_millis(5), || {
        let recs = d.records();
        let ok = ids.iter().all(|id| {
            recs.iter().any(|r| {
                &r.id == id && r.state == ContainerState::Running && r.container.as_ref().is_some_and(sandbox::is_alive)
            })
        });
        ok.then_some(())
    })
    .is_some()
}

fn scratch_dir(tag: &str) -> io::Result<tempfile::TempDir> {
    tempfile::Builder::new().prefix(&format!("hydra-{tag}-")).tempdir()
}

/// Launches `n` containers, SIGKILLs the daemon and restarts it
/// `restarts` times per trial. Metrics: `daemon_restore_ms` (lock to end of
/// reconciliation, as reported by the daemon), `ready_ms` (kill to all
/// containers Running again), `survivors` (containers with unchanged pid and
/// start time) and `restart_count`.
pub fn exp_daemon_restart(
    cfg: &HarnessConfig,
    modes: &[SupervisionMode],
    n: usize,
    trials: u32,
    restarts: u32,
) -> io::Result<ExperimentReport> {
    let mut report = ExperimentReport::new("daemon_restart");
    for &mode in modes {
        for trial in 0..trials {
            let dir = scratch_dir("restart")?;
            let mut d = DaemonProc::start(&cfg.hydra_exe, dir.path(), mode, cfg.poll_interval_ms, cfg.seed)?;
            let ids = launch_sleepers(&d, n)?;
            let before = live_identities(&d.records());
            for round in 0..restarts {
                let t0 = Instant::now();
                d.crash()?;
                d.restart()?;
                let restore_ms = d.client().status().map(|s| s.restore_ms).unwrap_or(f64::NAN);
                let ready = wait_all_running(&d, &ids, Duration::from_secs(20));
                let ready_ms = if ready { ms(t0.elapsed()) } else { f64::NAN };
                let after = d.records();
                let survivors = before
                    .iter()
                    .filter(|(id, c)| after.iter().any(|r| &r.id == id && r.container == Some(*c) && sandbox::is_alive(c)))
                    .count();
                let restarts_seen: u32 = after.iter().map(|r| r.restart_count).sum();
                let t = trial * restarts + round;
                report.push(mode.as_str(), t, "daemon_restore_ms", restore_ms, "ms");
                report.push(mode.as_str(), t, "ready_ms", ready_ms, "ms");
                report.push(mode.as_str(), t, "survivors", survivors as f64, "containers");
                report.push(mode.as_str(), t, "containers", n as f64, "containers");
                report.push(mode.as_str(), t, "restart_count", restarts_seen as f64, "restarts");
            }
            d.teardown();
        }
    }
    Ok(report)
}

/// The echo workload: waits `startup`, then answers each line on `socket`.
pub fn run_responder(socket: &Path, startup: Duration) -> io::Result<()> {
    thread::sleep(startup);
    let _ = fs::remove_file(socket);
    let listener = UnixListener::bind(socket)?;
    for conn in listener.incoming() {
        let Ok(stream) = conn else { continue };
        let mut reader = BufReader::new(match stream.try_clone() {
            Ok(s) => s,
            Err(_) => continue,
        });
        let mut writer = stream;
        let mut line = String::new();
        while matches!(reader.read_line(&mut line), Ok(n) if n > 0) {
            if writer.write_all(line.as_bytes()).is_err() {
                break;
            }
            line.clear();
        }
    }
    Ok(())
}

fn probe(socket: &Path) -> bool {
    let Ok(mut s) = UnixStream::connect(socket) else { return false };
    let _ = s.set_read_timeout(Some(Duration::from_millis(50)));
    let _ = s.set_write_timeout(Some(Duration::from_millis(50)));
    if s.write_all(b"ping\n").is_err() {
        return false;
    }
    let mut line = String::new();
    matches!(BufReader::new(s).read_line(&mut line), Ok(n) if n > 0) && line == "ping\n"
}

/// Probes `socket` every `interval` until stopped; returns the instants of
/// successful probes.
pub struct Prober {
    stop: Arc<AtomicBool>,
    handle: thread::JoinHandle<Vec<Instant>>,
}

impl Prober {
    pub fn start(socket: PathBuf, interval: Duration) -> Self {
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let handle = thread::spawn(move || {
            let mut ok = Vec::new();
            let mut next = Instant::now();
            while !flag.load(Ordering::SeqCst) {
                if probe(&socket) {
                    ok.push(Instant::now());
                }
                next += interval;
                let now = Instant::now();
                if next > now {
                    thread::sleep(next - now);
                } else {
                    next = now;
                }
            }
            ok
        });
        Prober { stop, handle }
    }

    pub fn finish(self) -> Vec<Instant> {
        self.stop.store(true, Ordering::SeqCst);
        self.handle.join().unwrap_or_default()
    }
}

/// Longest interval between consecutive successful probes.
pub fn max_gap(successes: &[Instant]) -> Option<Duration> {
    successes.windows(2).map(|w| w[1] - w[0]).max()
}

/// Upgrade outage: an echo responder container is probed every 10 ms while
/// the daemon is stopped and started again (a simulated binary swap).
/// `None` in `modes` runs the no-upgrade control. Metric: `max_gap_ms`.
pub fn exp_upgrade_outage(
    cfg: &HarnessConfig,
    modes: &[Option<SupervisionMode>],
    trials: u32,
    app_startup_ms: u64,
) -> io::Result<ExperimentReport> {
    let mut report = ExperimentReport::new("upgrade_outage");
    for &mode in modes {
        let label = mode.map(|m| m.as_str()).unwrap_or("control");
        for trial in 0..trials {
            let dir = scratch_dir("upgrade")?;
            let socket = dir.path().join("app.sock");
            let mut d = DaemonProc::start(
                &cfg.hydra_exe,
                &dir.path().join("state"),
                mode.unwrap_or_default(),
                cfg.poll_interval_ms,
                cfg.seed,
            )?;
            let spec = ContainerSpec::new([
                cfg.bench_exe.to_string_lossy().into_owned(),
                "responder".into(),
                "--socket".into(),
                socket.to_string_lossy().into_owned(),
                "--startup-ms".into(),
                app_startup_ms.to_string(),
            ]);
            d.client().run(spec).map_err(io::Error::other)?;
            if poll_until(Duration::from_secs(10), Duration::from_millis(5), || probe(&socket).then_some(())).is_none() {
                return Err(io::Error::other("responder never came up"));
            }
            let prober = Prober::start(socket.clone(), Duration::from_millis(10));
            thread::sleep(Duration::from_millis(200));
            let t0 = Instant::now();
            if mode.is_some() {
                d.shutdown()?;
                d.restart()?;
            }
            // Wait for the app to answer after the swap, then a quiet tail.
            let _ = poll_until(Duration::from_secs(15), Duration::from_millis(5), || probe(&socket).then_some(()));
            thread::sleep(Duration::from_millis(200).max(Duration::from_millis(app_startup_ms) / 2));
            let swap_ms = ms(t0.elapsed());
            let ok = prober.finish();
            let gap = max_gap(&ok).map(ms).unwrap_or(f64::NAN);
            report.push(label, trial, "max_gap_ms", gap, "ms");
            report.push(label, trial, "window_ms", swap_ms, "ms");
            report.push(label, trial, "probes_ok", ok.len() as f64, "probes");
            d.teardown();
        }
    }
    Ok(report)
}

/// True once no ancestor of `monitor` up to its grandparent is the daemon
/// or a child of it, i.e. the process tree has been reorganised.
fn hierarchy_settled(mode: SupervisionMode, daemon: i32, monitor: i32) -> bool {
    if mode != SupervisionMode::Decoupled {
        return true;
    }
    let Some(stat) = sandbox::read_stat(monitor) else { return true };
    if stat.ppid == daemon {
        return false;
    }
    sandbox::read_stat(stat.ppid).is_none_or(|parent| parent.ppid != daemon)
}

/// Launch latency: time from the `run` request until the container is
/// Running and, in decoupled mode, the monitor has left the daemon's
/// subtree. Modes are interleaved per trial. Metrics per mode:
/// `latency_ms` and `delta_ms` (minus the coupled latency of the same trial).
pub fn exp_spawn_latency(cfg: &HarnessConfig, trials: u32) -> io::Result<ExperimentReport> {
    let mut report = ExperimentReport::new("spawn_latency");
    let modes = SupervisionMode::ALL;
    let dirs: Vec<tempfile::TempDir> = modes.iter().map(|_| scratch_dir("spawn")).collect::<io::Result<_>>()?;
    let daemons: Vec<DaemonProc> = modes
        .iter()
        .zip(&dirs)
        .map(|(&m, dir)| DaemonProc::start(&cfg.hydra_exe, dir.path(), m, cfg.poll_interval_ms, cfg.seed))
        .collect::<io::Result<_>>()?;
    let spec = ContainerSpec::new(["true"]);
    // One untimed launch each to warm caches.
    for d in &daemons {
        d.client().run(spec.clone()).map_err(io::Error::other)?;
    }
    for trial in 0..trials {
        let mut latencies = Vec::new();
        for d in &daemons {
            thread::sleep(Duration::from_millis(20));
            let client = d.client();
            let daemon_pid = d.pid().unwrap_or_default();
            let t0 = Instant::now();
            let reply = client.run(spec.clone()).map_err(io::Error::other)?;
            while !hierarchy_settled(d.mode, daemon_pid, reply.monitor_pid) {
                if t0.elapsed() > Duration::from_secs(5) {
                    break;
                }
                thread::sleep(Duration::from_micros(100));
            }
            let latency = ms(t0.elapsed());
            latencies.push((d.mode, latency));
            report.push(d.mode.as_str(), trial, "latency_ms", latency, "ms");
        }
        let base = latencies.iter().find(|(m, _)| *m == SupervisionMode::Coupled).map(|(_, l)| *l).unwrap_or(0.0);
        for (m, l) in latencies {
            report.push(m.as_str(), trial, "delta_ms", l - base, "ms");
        }
    }
    for d in daemons {
        d.teardown();
    }
    Ok(report)
}

/// Scalability: launch up to `max_n` idle containers one by one and sample
/// the daemon at n = 1, step, 2*step, ... Metrics: `launch_ms`, `rss_bytes`,
/// `threads`, with the trial column holding n.
pub fn exp_scalability(
    cfg: &HarnessConfig,
    modes: &[SupervisionMode],
    max_n: u32,
    step: u32,
) -> io::Result<ExperimentReport> {
    let mut report = ExperimentReport::new("scalability");
    let step = step.max(1);
    for &mode in modes {
        let dir = scratch_dir("scale")?;
        let d = DaemonProc::start(&cfg.hydra_exe, dir.path(), mode, cfg.poll_interval_ms, cfg.seed)?;
        let client = d.client();
        for n in 1..=max_n {
            let t0 = Instant::now();
            client.run(sleeper_spec()).map_err(io::Error::other)?;
            let launch = ms(t0.elapsed());
            if n == 1 || n % step == 0 || n == max_n {
                // Let the handshake connection and any transient buffers go.
                thread::sleep(Duration::from_millis(50));
                let (rss, threads) = d.rss_and_threads().ok_or_else(|| io::Error::other("daemon vanished"))?;
                report.push(mode.as_str(), n, "launch_ms", launch, "ms");
                report.push(mode.as_str(), n, "rss_bytes", rss as f64, "bytes");
                report.push(mode.as_str(), n, "threads", threads as f64, "threads");
            }
        }
        d.teardown();
    }
    Ok(report)
}
