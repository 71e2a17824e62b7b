use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::os::unix::net::UnixStream;
use std::thread;
use std::time::{Duration, Instant};

use hydra::harness::{self, DaemonProc};
use hydra_core::client::{LogSource, MonitorClient};
use hydra_core::model::{ContainerId, ContainerSpec, ContainerState, ExitStatus, Isolation};
use hydra_core::protocol::{Frame, StreamTag};
use hydra_core::sandbox;
use hydra_core::SupervisionMode;
use tempfile::TempDir;

const HYDRA: &str = env!("CARGO_BIN_EXE_hydra");

fn daemon(mode: SupervisionMode, poll_ms: u64) -> (TempDir, DaemonProc) {
    let dir = tempfile::tempdir().unwrap();
    let d = DaemonProc::start(HYDRA.as_ref(), dir.path(), mode, poll_ms, None).unwrap();
    (dir, d)
}

fn eventually<T>(timeout: Duration, mut f: impl FnMut() -> Option<T>) -> T {
    let deadline = Instant::now() + timeout;
    loop {
        if let Some(v) = f() {
            return v;
        }
        assert!(Instant::now() < deadline, "condition not reached within {timeout:?}");
        thread::sleep(Duration::from_millis(10));
    }
}

fn stdout_of(frames: &[Frame]) -> Vec<u8> {
    frames.iter().filter(|f| f.tag == StreamTag::Stdout).flat_map(|f| f.payload.clone()).collect()
}

fn record(d: &DaemonProc, id: &ContainerId) -> hydra_core::model::ContainerRecord {
    d.client().ps().unwrap().containers.into_iter().find(|r| &r.id == id).unwrap()
}

#[test]
fn attach_forwards_stdin_and_output() {
    let (_dir, d) = daemon(SupervisionMode::Decoupled, 200);
    let client = d.client();
    let run = client.run(ContainerSpec::new(["cat"])).unwrap();
    let sock = client.attach_socket(&run.id).unwrap();
    let mut stream = MonitorClient::new(sock).attach(true, false).unwrap();
    stream.send_stdin(b"ping\n").unwrap();
    let echoed = stream.next_frame().unwrap().unwrap();
    assert_eq!((echoed.tag, echoed.payload.as_slice()), (StreamTag::Stdout, &b"ping\n"[..]));
    stream.close_stdin().unwrap();
    let rest = stream.collect().unwrap();
    assert_eq!(rest.last().unwrap().tag, StreamTag::ExitNotice);
    assert_eq!(client.wait(&run.id).unwrap().exit_code, Some(0));
    d.teardown();
}

#[test]
fn attached_clients_see_identical_frames() {
    let (_dir, d) = daemon(SupervisionMode::Decoupled, 200);
    let client = d.client();
    let run = client.run(ContainerSpec::new(["sh", "-c", "sleep 0.4; for i in 1 2 3; do echo $i; done; echo e >&2"])).unwrap();
    let sock = client.attach_socket(&run.id).unwrap();
    let a = MonitorClient::new(&sock).attach(false, false).unwrap();
    let b = MonitorClient::new(&sock).attach(false, false).unwrap();
    let (a, b) = (a.collect().unwrap(), b.collect().unwrap());
    assert_eq!(a, b);
    assert_eq!(stdout_of(&a), b"1\n2\n3\n");
    assert!(a.iter().any(|f| f.tag == StreamTag::Stderr && f.payload == b"e\n"));
    d.teardown();
}

#[test]
fn logs_survive_container_exit() {
    let (_dir, d) = daemon(SupervisionMode::Decoupled, 200);
    let client = d.client();
    let run = client.run(ContainerSpec::new(["sh", "-c", "echo hello; echo oops >&2; exit 4"])).unwrap();
    assert_eq!(client.wait(&run.id).unwrap().exit_code, Some(4));
    let frames = match client.logs(&run.id).unwrap() {
        LogSource::Stream(s) => s.collect().unwrap(),
        LogSource::Monitor(sock) => MonitorClient::new(sock).logs(false).unwrap().collect().unwrap(),
    };
    assert_eq!(stdout_of(&frames), b"hello\n");
    assert!(frames.iter().any(|f| f.tag == StreamTag::Stderr && f.payload == b"oops\n"));
    d.teardown();
}

#[test]
fn exec_joins_running_container() {
    let (_dir, d) = daemon(SupervisionMode::Decoupled, 200);
    let client = d.client();
    let run = client.run(harness::sleeper_spec()).unwrap();
    let sock = client.exec_socket(&run.id).unwrap();
    let frames = MonitorClient::new(sock)
        .exec(vec!["sh".into(), "-c".into(), "echo $FOO; ps -o pgid= -p $$".into()], vec!["FOO=bar".into()])
        .unwrap()
        .collect()
        .unwrap();
    let out = String::from_utf8(stdout_of(&frames)).unwrap();
    let mut lines = out.lines();
    assert_eq!(lines.next(), Some("bar"));
    if let Some(pgid) = lines.next() {
        assert_eq!(pgid.trim(), run.pid.to_string());
    }
    assert_eq!(frames.last().unwrap().tag, StreamTag::ExitNotice);
    assert_eq!(record(&d, &run.id).state, ContainerState::Running);
    d.teardown();
}

#[test]
fn lifecycle_errors_and_idempotence() {
    let (_dir, d) = daemon(SupervisionMode::Decoupled, 200);
    let client = d.client();
    let run = client.run(harness::sleeper_spec()).unwrap();
    assert_eq!(client.rm(&run.id).unwrap_err().code(), Some("rm_running"));
    assert_eq!(client.unpause(&run.id).unwrap_err().code(), Some("invalid_state"));
    client.kill(&run.id).unwrap();
    assert_eq!(client.wait(&run.id).unwrap().term_signal, Some(9));
    client.kill(&run.id).unwrap();
    client.stop(&run.id, None).unwrap();
    client.rm(&run.id).unwrap();
    assert!(client.ps().unwrap().containers.is_empty());
    assert!(!d.layout.container_dir(&run.id).exists());
    let ghost = ContainerId::from_u64(0xdead);
    assert_eq!(client.wait(&ghost).unwrap_err().code(), Some("not_found"));
    d.teardown();
}

#[test]
fn unknown_op_is_rejected() {
    let (_dir, d) = daemon(SupervisionMode::Decoupled, 200);
    let mut s = UnixStream::connect(d.layout.daemon_sock()).unwrap();
    s.write_all(b"{\"op\":\"frobnicate\"}\n").unwrap();
    let mut line = String::new();
    BufReader::new(&s).read_line(&mut line).unwrap();
    let v: serde_json::Value = serde_json::from_str(&line).unwrap();
    assert_eq!(v["ok"], false);
    assert_eq!(v["error"], "unknown_op");
    d.teardown();
}

#[test]
fn missing_executable_exits_127() {
    let (_dir, d) = daemon(SupervisionMode::Decoupled, 200);
    let client = d.client();
    let err = client.run(ContainerSpec::new(["/nonexistent/binary"])).unwrap_err();
    assert_eq!(err.code(), Some("spawn_error"));
    let rec = client.ps().unwrap().containers.pop().unwrap();
    assert_eq!(rec.state, ContainerState::Exited(ExitStatus::Code(127)));
    assert!(rec.launch_error.is_some());
    d.teardown();
}

#[test]
fn restart_and_start_reuse_the_id() {
    let (_dir, d) = daemon(SupervisionMode::Decoupled, 200);
    let client = d.client();
    let run = client.run(harness::sleeper_spec()).unwrap();
    let again = client.restart(&run.id).unwrap();
    assert_eq!(again.id, run.id);
    assert_ne!(again.pid, run.pid);
    assert_eq!(record(&d, &run.id).state, ContainerState::Running);
    client.kill(&run.id).unwrap();
    client.wait(&run.id).unwrap();
    let started = client.start(&run.id).unwrap();
    assert_eq!(record(&d, &started.id).state, ContainerState::Running);
    d.teardown();
}

#[test]
fn monitor_placement_per_mode() {
    for (mode, daemon_is_parent) in [(SupervisionMode::Lazy, true), (SupervisionMode::Decoupled, false)] {
        let (_dir, d) = daemon(mode, 200);
        let daemon_pid = d.pid().unwrap();
        let mut ids = Vec::new();
        for _ in 0..20 {
            let run = d.client().run(harness::sleeper_spec()).unwrap();
            if daemon_is_parent {
                assert_eq!(sandbox::read_stat(run.monitor_pid).unwrap().ppid, daemon_pid);
            } else {
                eventually(Duration::from_secs(2), || {
                    (sandbox::read_stat(run.monitor_pid).unwrap().ppid != daemon_pid).then_some(())
                });
            }
            ids.push(run.id);
        }
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 20, "{mode:?}");
        d.teardown();
    }
}

#[test]
fn monitor_loss_without_restart_marks_exit_unknown() {
    let (_dir, d) = daemon(SupervisionMode::Decoupled, 200);
    let client = d.client();
    let mut spec = harness::sleeper_spec();
    spec.restart_on_monitor_loss = false;
    let run = client.run(spec).unwrap();
    let container = record(&d, &run.id).container.unwrap();
    sandbox::send_signal(run.monitor_pid, libc::SIGKILL).unwrap();
    let rec = eventually(Duration::from_secs(3), || Some(record(&d, &run.id)).filter(|r| r.state.is_exited()));
    assert!(rec.exit_unknown);
    assert_eq!(rec.restart_count, 0);
    assert!(!sandbox::is_alive(&container));
    d.teardown();
}

#[test]
fn healthy_containers_are_left_alone_by_the_poller() {
    let (_dir, d) = daemon(SupervisionMode::Decoupled, 100);
    let run = d.client().run(harness::sleeper_spec()).unwrap();
    thread::sleep(Duration::from_millis(600));
    let rec = record(&d, &run.id);
    assert_eq!((rec.state, rec.restart_count), (ContainerState::Running, 0));
    assert_eq!(rec.container.unwrap().pid, run.pid);
    d.teardown();
}

#[test]
fn second_daemon_refuses_to_start() {
    let (dir, d) = daemon(SupervisionMode::Decoupled, 200);
    let out = std::process::Command::new(HYDRA)
        .arg("--state-dir")
        .arg(dir.path())
        .args(["daemon", "start", "--foreground"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("already"), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(d.client().ping());
    d.teardown();
}

#[test]
fn bad_state_files_are_quarantined() {
    let dir = tempfile::tempdir().unwrap();
    let bogus = ContainerId::from_u64(0xbad);
    let rec_path = dir.path().join("containers").join(bogus.as_str()).join("record.json");
    fs::create_dir_all(rec_path.parent().unwrap()).unwrap();
    fs::write(&rec_path, b"{not json").unwrap();
    let d = DaemonProc::start(HYDRA.as_ref(), dir.path(), SupervisionMode::Decoupled, 100, None).unwrap();
    assert!(d.records().is_empty());
    let mut corrupt = rec_path.into_os_string();
    corrupt.push(".corrupt");
    assert!(std::path::Path::new(&corrupt).exists());

    let stray = d.layout.exit_path(&ContainerId::from_u64(0xfeed));
    fs::write(&stray, "000000000000feed code 0 1\n").unwrap();
    let mut moved = stray.clone().into_os_string();
    moved.push(".corrupt");
    eventually(Duration::from_secs(2), || std::path::Path::new(&moved).exists().then_some(()));
    assert!(!stray.exists());
    d.teardown();
}

#[test]
fn waiters_learn_exit_after_daemon_restart() {
    let (dir, mut d) = daemon(SupervisionMode::Decoupled, 200);
    let gate = dir.path().join("gate");
    let spec = ContainerSpec::new(["sh", "-c", r#"while [ ! -e "$0" ]; do sleep 0.02; done; exit 5"#, gate.to_str().unwrap()]);
    let run = d.client().run(spec).unwrap();
    d.crash().unwrap();
    fs::write(&gate, b"").unwrap();
    eventually(Duration::from_secs(5), || d.layout.exit_path(&run.id).exists().then_some(()));
    d.restart().unwrap();
    let rec = record(&d, &run.id);
    assert_eq!(rec.state, ContainerState::Exited(ExitStatus::Code(5)));
    let line = fs::read_to_string(d.layout.exit_path(&run.id)).unwrap();
    assert!(line.starts_with(&format!("{} code 5 ", run.id.as_str())), "{line}");
    d.teardown();
}

#[test]
fn isolated_container_sees_itself_as_pid_one() {
    let (_dir, d) = daemon(SupervisionMode::Decoupled, 200);
    let client = d.client();
    let mut spec = ContainerSpec::new(["sh", "-c", "echo $$; hostname"]);
    spec.isolation = Isolation::Namespaces;
    match client.run(spec) {
        Ok(run) => {
            assert_eq!(client.wait(&run.id).unwrap().exit_code, Some(0));
            let frames = match client.logs(&run.id).unwrap() {
                LogSource::Stream(s) => s.collect().unwrap(),
                LogSource::Monitor(sock) => MonitorClient::new(sock).logs(false).unwrap().collect().unwrap(),
            };
            let out = String::from_utf8(stdout_of(&frames)).unwrap();
            assert_eq!(out.lines().next(), Some("1"));
        }
        // Namespaces need privileges this environment may not grant.
        Err(e) => assert_eq!(e.code(), Some("spawn_error"), "{e}"),
    }
    d.teardown();
}

#[test]
fn log_preserves_per_stream_order() {
    let (_dir, d) = daemon(SupervisionMode::Decoupled, 200);
    let client = d.client();
    let script = "i=0; while [ $i -lt 300 ]; do echo o$i; echo e$i >&2; i=$((i+1)); done";
    let run = client.run(ContainerSpec::new(["sh", "-c", script])).unwrap();
    client.wait(&run.id).unwrap();
    let bytes = fs::read(d.layout.log_path(&run.id)).unwrap();
    let frames = hydra_core::protocol::decode_frames(&bytes).unwrap();
    assert!(frames.iter().all(|f| matches!(f.tag, StreamTag::Stdout | StreamTag::Stderr)));
    let stream = |tag, prefix: &str| {
        let joined: Vec<u8> = frames.iter().filter(|f| f.tag == tag).flat_map(|f| f.payload.clone()).collect();
        let want: String = (0..300).map(|i| format!("{prefix}{i}\n")).collect();
        assert_eq!(String::from_utf8(joined).unwrap(), want);
    };
    stream(StreamTag::Stdout, "o");
    stream(StreamTag::Stderr, "e");
    d.teardown();
}

#[test]
fn containers_survive_repeated_daemon_crashes() {
    for mode in [SupervisionMode::Lazy, SupervisionMode::Decoupled] {
        let (_dir, mut d) = daemon(mode, 200);
        harness::launch_sleepers(&d, 3).unwrap();
        let before = harness::live_identities(&d.records());
        for round in 0..4 {
            if round % 2 == 0 {
                d.crash().unwrap();
            } else {
                d.shutdown().unwrap();
            }
            d.restart().unwrap();
        }
        assert_eq!(harness::live_identities(&d.records()), before, "{mode:?}");
        assert!(before.iter().all(|(_, c)| sandbox::is_alive(c)));
        d.teardown();
    }
}

#[test]
fn waiter_stays_blocked_across_monitor_loss_reboot() {
    let (_dir, d) = daemon(SupervisionMode::Decoupled, 100);
    let client = d.client();
    let run = client.run(harness::sleeper_spec()).unwrap();
    let waiter = {
        let (client, id) = (d.client(), run.id.clone());
        thread::spawn(move || client.wait(&id).unwrap())
    };
    sandbox::send_signal(run.monitor_pid, libc::SIGKILL).unwrap();
    let rebooted = eventually(Duration::from_secs(3), || {
        Some(record(&d, &run.id)).filter(|r| r.restart_count == 1 && r.state == ContainerState::Running)
    });
    assert!(!waiter.is_finished());
    assert_ne!(rebooted.container.unwrap().pid, run.pid);
    client.kill(&run.id).unwrap();
    assert_eq!(waiter.join().unwrap().term_signal, Some(9));
    d.teardown();
}
