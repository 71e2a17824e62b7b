//! Acceptance suite. Runs every criterion in order and prints one PASS/FAIL
//! line each; exits nonzero if any failed.

use std::ffi::CString;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::thread;
use std::time::{Duration, Instant};

use hydra::harness::{self, DaemonProc, HarnessConfig};
use hydra_core::model::{ContainerId, ContainerSpec, ContainerState, ExitReport, ExitStatus};
use hydra_core::protocol::{decode_frames, encode_exit_line, encode_frame, parse_exit_line, Frame, StreamTag};
use hydra_core::sandbox;
use hydra_core::SupervisionMode;
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};

type Check = fn(&HarnessConfig) -> Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn io<T>(r: std::io::Result<T>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn scratch() -> tempfile::TempDir {
    tempfile::Builder::new().prefix("hydra-accept-").tempdir().expect("tempdir")
}

fn poll<T>(timeout: Duration, mut f: impl FnMut() -> Option<T>) -> Option<T> {
    let deadline = Instant::now() + timeout;
    loop {
        if let Some(v) = f() {
            return Some(v);
        }
        if Instant::now() > deadline {
            return None;
        }
        thread::sleep(Duration::from_millis(5));
    }
}

fn survival(cfg: &HarnessConfig) -> Result<String, String> {
    let t0 = Instant::now();
    let r = io(harness::exp_daemon_restart(cfg, &SupervisionMode::ALL, 10, 1, 1))?;
    let one = |mode: SupervisionMode, metric| r.values(mode.as_str(), metric)[0];
    for mode in [SupervisionMode::Decoupled, SupervisionMode::Lazy] {
        ensure(one(mode, "survivors") == 10.0, || format!("{} kept {}/10", mode.as_str(), one(mode, "survivors")))?;
        ensure(one(mode, "restart_count") == 0.0, || format!("{} restarted containers", mode.as_str()))?;
    }
    let coupled = one(SupervisionMode::Coupled, "survivors");
    ensure(coupled == 0.0, || format!("coupled kept {coupled}/10"))?;
    let elapsed = t0.elapsed();
    ensure(elapsed < Duration::from_secs(30), || format!("took {elapsed:?}"))?;
    Ok(format!("decoupled 10/10, lazy 10/10, coupled 0/10 in {:.1} s", elapsed.as_secs_f64()))
}

fn exit_across_downtime(cfg: &HarnessConfig) -> Result<String, String> {
    let t0 = Instant::now();
    let dir = scratch();
    let trigger = dir.path().join("trigger");
    let mut d = io(DaemonProc::start(&cfg.hydra_exe, &dir.path().join("state"), SupervisionMode::Decoupled, cfg.poll_interval_ms, None))?;
    let spec = ContainerSpec::new([
        "sh",
        "-c",
        r#"while [ ! -e "$0" ]; do sleep 0.02; done; exit 7"#,
        trigger.to_str().unwrap(),
    ]);
    let id = d.client().run(spec).map_err(|e| e.to_string())?.id;
    io(d.crash())?;
    io(std::fs::write(&trigger, b""))?;
    let exit_file = d.layout.exit_path(&id);
    ensure(poll(Duration::from_secs(10), || exit_file.exists().then_some(())).is_some(), || "no exit file while daemon down".into())?;
    io(d.restart())?;
    let reply = d.client().wait(&id).map_err(|e| e.to_string())?;
    d.teardown();
    ensure(reply.exit_code == Some(7), || format!("wait returned {reply:?}"))?;
    ensure(t0.elapsed() < Duration::from_secs(15), || format!("took {:?}", t0.elapsed()))?;
    Ok(format!("wait after restart returned 7 in {:.1} s", t0.elapsed().as_secs_f64()))
}

fn upgrade_outage(cfg: &HarnessConfig) -> Result<String, String> {
    let modes = [Some(SupervisionMode::Decoupled), Some(SupervisionMode::Coupled)];
    let r = io(harness::exp_upgrade_outage(cfg, &modes, 3, 250))?;
    let dec = r.median("decoupled", "max_gap_ms").unwrap_or(f64::NAN);
    let cou = r.median("coupled", "max_gap_ms").unwrap_or(f64::NAN);
    ensure(dec < 100.0, || format!("decoupled gap {dec:.1} ms"))?;
    ensure(cou >= 10.0 * dec, || format!("coupled gap {cou:.1} ms is not 10x decoupled {dec:.1} ms"))?;
    Ok(format!("median max probe gap: decoupled {dec:.1} ms, coupled {cou:.1} ms ({:.0}x)", cou / dec))
}

fn restore_speed(cfg: &HarnessConfig) -> Result<String, String> {
    let r = io(harness::exp_daemon_restart(cfg, &[SupervisionMode::Decoupled], 10, 3, 1))?;
    let v = r.values("decoupled", "daemon_restore_ms");
    let worst = v.iter().copied().fold(f64::NAN, f64::max);
    ensure(worst < 500.0, || format!("restore took {worst:.1} ms"))?;
    Ok(format!(
        "restore of 10 containers: median {:.2} ms, worst {worst:.2} ms (reference figure 40 ms)",
        r.median("decoupled", "daemon_restore_ms").unwrap_or(f64::NAN)
    ))
}

fn spawn_overhead(cfg: &HarnessConfig) -> Result<String, String> {
    let r = io(harness::exp_spawn_latency(cfg, 50))?;
    let lazy = r.median("lazy", "delta_ms").unwrap_or(f64::NAN);
    let dec = r.median("decoupled", "delta_ms").unwrap_or(f64::NAN);
    ensure(r.values("decoupled", "delta_ms").len() >= 50, || "fewer than 50 trials".into())?;
    ensure(lazy <= dec, || format!("lazy delta {lazy:.2} ms > decoupled delta {dec:.2} ms"))?;
    ensure(dec < 300.0, || format!("decoupled delta {dec:.2} ms"))?;
    Ok(format!("median delta vs coupled over 50 trials: lazy {lazy:.2} ms, decoupled {dec:.2} ms"))
}

fn strictly_increasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] > w[0])
}

fn no_bloat(cfg: &HarnessConfig) -> Result<String, String> {
    let r = io(harness::exp_scalability(cfg, &[SupervisionMode::Decoupled, SupervisionMode::Coupled], 100, 10))?;
    let threads = r.values("decoupled", "threads");
    let rss = r.values("decoupled", "rss_bytes");
    ensure(threads.len() == 11, || format!("{} samples", threads.len()))?;
    ensure(threads.iter().all(|t| *t == threads[0]), || format!("decoupled threads {threads:?}"))?;
    let growth = rss[rss.len() - 1] - rss[0];
    ensure(growth < 10.0 * 1024.0 * 1024.0, || format!("decoupled RSS grew {growth} bytes"))?;
    let c_threads = r.values("coupled", "threads");
    let c_rss = r.values("coupled", "rss_bytes");
    ensure(strictly_increasing(&c_threads), || format!("coupled threads {c_threads:?}"))?;
    ensure(strictly_increasing(&c_rss), || format!("coupled rss {c_rss:?}"))?;
    Ok(format!(
        "decoupled: {} threads throughout, RSS +{:.0} KiB for 1..100; coupled: threads {}..{}, RSS +{:.1} MiB",
        threads[0],
        growth / 1024.0,
        c_threads[0],
        c_threads[c_threads.len() - 1],
        (c_rss[c_rss.len() - 1] - c_rss[0]) / 1024.0 / 1024.0
    ))
}

fn monitor_crash(cfg: &HarnessConfig) -> Result<String, String> {
    let dir = scratch();
    let poll_ms = hydra_core::daemon::DEFAULT_POLL_INTERVAL_MS;
    let d = io(DaemonProc::start(&cfg.hydra_exe, dir.path(), SupervisionMode::Decoupled, poll_ms, None))?;
    let client = d.client();
    let reply = client.run(harness::sleeper_spec()).map_err(|e| e.to_string())?;
    let before = client.ps().map_err(|e| e.to_string())?.containers[0].clone();
    let old = before.container.ok_or("no container identity")?;
    let t0 = Instant::now();
    nix::sys::signal::kill(nix::unistd::Pid::from_raw(reply.monitor_pid), nix::sys::signal::Signal::SIGKILL)
        .map_err(|e| e.to_string())?;
    let recovered = poll(Duration::from_millis(3 * poll_ms), || {
        let rec = client.ps().ok()?.containers.into_iter().find(|r| r.id == reply.id)?;
        let c = rec.container?;
        (rec.state == ContainerState::Running && rec.restart_count == 1 && c != old && sandbox::is_alive(&c))
            .then_some((rec, t0.elapsed()))
    });
    d.teardown();
    let (rec, took) = recovered.ok_or("container was not rebooted")?;
    ensure(took <= Duration::from_millis(2 * poll_ms), || format!("recovery took {took:?}"))?;
    ensure(!sandbox::is_alive(&old), || "old container still alive".into())?;
    Ok(format!(
        "rebooted as pid {} (was {}), restart_count 1, after {:.0} ms",
        rec.container.map(|c| c.pid).unwrap_or_default(),
        old.pid,
        took.as_secs_f64() * 1000.0
    ))
}

fn mkfifo(path: &Path) -> Result<(), String> {
    let c = CString::new(path.to_str().unwrap()).unwrap();
    // SAFETY: valid NUL-terminated path.
    if unsafe { libc::mkfifo(c.as_ptr(), 0o600) } != 0 {
        return Err(std::io::Error::last_os_error().to_string());
    }
    Ok(())
}

/// Opens and closes the write side without blocking; readers blocked in
/// open(2) are released and then see EOF.
fn pulse_fifo(path: &Path) -> bool {
    let c = CString::new(path.to_str().unwrap()).unwrap();
    // SAFETY: valid path; the descriptor is closed right away.
    let fd = unsafe { libc::open(c.as_ptr(), libc::O_WRONLY | libc::O_NONBLOCK) };
    if fd >= 0 {
        unsafe { libc::close(fd) };
    }
    fd >= 0
}

fn coalescing(cfg: &HarnessConfig) -> Result<String, String> {
    let t0 = Instant::now();
    let dir = scratch();
    let fifo = dir.path().join("go");
    mkfifo(&fifo)?;
    let d = io(DaemonProc::start(&cfg.hydra_exe, &dir.path().join("state"), SupervisionMode::Decoupled, cfg.poll_interval_ms, None))?;
    let client = d.client();
    let mut expected: Vec<(ContainerId, u8)> = Vec::new();
    for i in 0..50u32 {
        let code = ((i * 37 + 3) % 256) as u8;
        let script = format!(r#"read x < "$0"; exit {code}"#);
        let spec = ContainerSpec::new(["sh".to_string(), "-c".into(), script, fifo.to_string_lossy().into_owned()]);
        let id = client.run(spec).map_err(|e| e.to_string())?.id;
        expected.push((id, code));
    }
    thread::sleep(Duration::from_millis(300));
    let all_exited = || {
        let recs = client.ps().ok()?.containers;
        recs.iter().all(|r| r.state.is_exited()).then_some(())
    };
    let released = poll(Duration::from_secs(50), || {
        pulse_fifo(&fifo);
        thread::sleep(Duration::from_millis(50));
        all_exited()
    });
    let recs = client.ps().map_err(|e| e.to_string())?.containers;
    d.teardown();
    ensure(released.is_some(), || "not every container exited".into())?;
    let mut wrong = Vec::new();
    for (id, code) in &expected {
        let rec = recs.iter().find(|r| &r.id == id).ok_or("record missing")?;
        if rec.state != ContainerState::Exited(ExitStatus::Code(*code)) || rec.exit_unknown {
            wrong.push(format!("{id}: want {code}, got {:?}", rec.state));
        }
    }
    ensure(wrong.is_empty(), || wrong.join("; "))?;
    ensure(t0.elapsed() < Duration::from_secs(60), || format!("took {:?}", t0.elapsed()))?;
    Ok(format!("50/50 exit codes correct in {:.1} s", t0.elapsed().as_secs_f64()))
}

fn golden_bytes(_: &HarnessConfig) -> Result<String, String> {
    let id = ContainerId::parse("aabbccddeeff0011").unwrap();
    let line = encode_exit_line(&ExitReport { container_id: id.clone(), status: ExitStatus::Code(0), finished_at: 1_700_000_000_000 });
    ensure(line == "aabbccddeeff0011 code 0 1700000000000\n", || format!("exit line {line:?}"))?;
    let line = encode_exit_line(&ExitReport { container_id: id, status: ExitStatus::Signal(9), finished_at: 42 });
    ensure(line == "aabbccddeeff0011 signal 9 42\n", || format!("exit line {line:?}"))?;
    let hi = encode_frame(StreamTag::Stdout, b"hi").unwrap();
    ensure(hi == [0x01, 0, 0, 0, 0x02, 0x68, 0x69], || format!("frame {hi:02x?}"))?;
    let empty = encode_frame(StreamTag::ExitNotice, b"").unwrap();
    ensure(empty == [0x03, 0, 0, 0, 0], || format!("frame {empty:02x?}"))?;

    let mut runner = TestRunner::new(Config { cases: 1000, failure_persistence: None, ..Config::default() });
    let report = (any::<u64>(), any::<bool>(), any::<u8>(), 1i32..=64, any::<u64>());
    runner
        .run(&report, |(id, is_code, code, sig, t)| {
            let status = if is_code { ExitStatus::Code(code) } else { ExitStatus::Signal(sig) };
            let r = ExitReport { container_id: ContainerId::from_u64(id), status, finished_at: t };
            prop_assert_eq!(parse_exit_line(&encode_exit_line(&r)).unwrap(), r);
            Ok(())
        })
        .map_err(|e| format!("exit-line round trip: {e}"))?;
    let frames = prop::collection::vec((0u8..4, prop::collection::vec(any::<u8>(), 0..256)), 0..=100);
    runner
        .run(&frames, |seq| {
            let frames: Vec<Frame> =
                seq.into_iter().map(|(t, p)| Frame::new(StreamTag::try_from(t).unwrap(), p)).collect();
            let bytes: Vec<u8> = frames.iter().flat_map(|f| f.encode().unwrap()).collect();
            prop_assert_eq!(decode_frames(&bytes).unwrap(), frames);
            Ok(())
        })
        .map_err(|e| format!("frame round trip: {e}"))?;
    Ok("golden vectors match; 1000 exit-line and 1000 frame-sequence round trips".into())
}

fn lifecycle(cfg: &HarnessConfig) -> Result<String, String> {
    let dir = scratch();
    let d = io(DaemonProc::start(&cfg.hydra_exe, dir.path(), SupervisionMode::Decoupled, cfg.poll_interval_ms, None))?;
    let client = d.client();
    let tree = client.run(ContainerSpec::new(["sh", "-c", "sleep 100 & sleep 100 & wait"])).map_err(|e| e.to_string())?;
    let rows = |want: usize| poll(Duration::from_secs(5), || Some(sandbox::sample_proc(tree.pid).rows).filter(|r| r.len() == want));
    let members = rows(3).ok_or("shell tree did not reach 3 processes")?.len();
    client.pause(&tree.id).map_err(|e| e.to_string())?;
    let paused = poll(Duration::from_secs(2), || {
        let r = sandbox::sample_proc(tree.pid).rows;
        (r.len() == members && r.iter().all(|p| p.state == "T")).then_some(())
    });
    client.unpause(&tree.id).map_err(|e| e.to_string())?;
    let resumed = poll(Duration::from_secs(2), || {
        let r = sandbox::sample_proc(tree.pid).rows;
        (r.len() == members && r.iter().all(|p| p.state != "T")).then_some(())
    });
    client.kill(&tree.id).map_err(|e| e.to_string())?;

    let stubborn = client
        .run(ContainerSpec::new(["sh", "-c", r#"trap "" TERM; while :; do sleep 0.1; done"#]))
        .map_err(|e| e.to_string())?;
    thread::sleep(Duration::from_millis(300));
    let t0 = Instant::now();
    client.stop(&stubborn.id, Some(500)).map_err(|e| e.to_string())?;
    let took = t0.elapsed();
    let rec = client.ps().map_err(|e| e.to_string())?.containers.into_iter().find(|r| r.id == stubborn.id);
    d.teardown();

    ensure(paused.is_some(), || "not every member reached state T".into())?;
    ensure(resumed.is_some(), || "members still stopped after unpause".into())?;
    let state = rec.map(|r| r.state);
    ensure(state == Some(ContainerState::Exited(ExitStatus::Signal(9))), || format!("stop ended in {state:?}"))?;
    let ms = took.as_secs_f64() * 1000.0;
    ensure((300.0..=700.0).contains(&ms), || format!("stop took {ms:.0} ms"))?;
    Ok(format!("pause froze {members}/{members} members, unpause resumed, stop(500) killed after {ms:.0} ms"))
}

fn main() {
    let cfg = HarnessConfig::new(env!("CARGO_BIN_EXE_hydra"), env!("CARGO_BIN_EXE_hydra-bench"));
    let criteria: [(&str, Check); 10] = [
        ("survival under daemon crash", survival),
        ("exit status across daemon downtime", exit_across_downtime),
        ("upgrade outage ordering", upgrade_outage),
        ("daemon restore speed", restore_speed),
        ("monitor-creation overhead ordering", spawn_overhead),
        ("no per-container daemon bloat", no_bloat),
        ("monitor-crash recovery", monitor_crash),
        ("signal-coalescing robustness", coalescing),
        ("protocol golden bytes", golden_bytes),
        ("lifecycle semantics", lifecycle),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let t0 = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(|| check(&cfg)))
            .unwrap_or_else(|p| Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panic".into())));
        let secs = t0.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail} [{secs:.1}s]", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {why} [{secs:.1}s]", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
