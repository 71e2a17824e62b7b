//! Wire and on-disk formats.
//!
//! State directory layout:
//!
//! ```text
//! <root>/daemon.sock                   daemon API socket (JSON lines)
//! <root>/daemon.pid                    "<pid> <start_ticks>\n"
//! <root>/daemon.lock                   flock held by the live daemon
//! <root>/containers/<id>/record.json   ContainerRecord
//! <root>/containers/<id>/monitor.sock  per-container monitor socket
//! <root>/exits/<id>.exit               exit file, one line
//! <root>/logs/<id>.log                 stdout/stderr frames
//! ```
//!
//! The exit file line is `<container_id> <code|signal> <value> <finished_at_ms>\n`.
//!
//! A frame is a one-byte tag (0 stdin, 1 stdout, 2 stderr, 3 exit notice), a
//! big-endian `u32` payload length and the payload. On the stdin direction an
//! empty payload closes the peer's stdin.

use std::fs::{self, DirBuilder, File, OpenOptions};
use std::io::{self, Read, Write};
use std::os::unix::fs::{DirBuilderExt, OpenOptionsExt, PermissionsExt};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::ProtocolError;
use crate::model::{ContainerId, ContainerRecord, ContainerSpec, ExitReport, ExitStatus, ProcessIdentity};

/// Derived paths under a state directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StateDirLayout {
    root: PathBuf,
}

impl StateDirLayout {
    /// Path arithmetic only; nothing is created.
    pub fn new(root: impl Into<PathBuf>) -> Result<Self, ProtocolError> {
        let root = root.into();
        if !root.is_absolute() {
            return Err(ProtocolError::RelativeRoot(root));
        }
        Ok(StateDirLayout { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }
    pub fn daemon_sock(&self) -> PathBuf {
        self.root.join("daemon.sock")
    }
    pub fn daemon_pid(&self) -> PathBuf {
        self.root.join("daemon.pid")
    }
    pub fn lock_file(&self) -> PathBuf {
        self.root.join("daemon.lock")
    }
    pub fn containers_dir(&self) -> PathBuf {
        self.root.join("containers")
    }
    pub fn container_dir(&self, id: &ContainerId) -> PathBuf {
        self.containers_dir().join(id.as_str())
    }
    pub fn record_path(&self, id: &ContainerId) -> PathBuf {
        self.container_dir(id).join("record.json")
    }
    pub fn monitor_sock(&self, id: &ContainerId) -> PathBuf {
        self.container_dir(id).join("monitor.sock")
    }
    pub fn exits_dir(&self) -> PathBuf {
        self.root.join("exits")
    }
    pub fn exit_path(&self, id: &ContainerId) -> PathBuf {
        self.exits_dir().join(format!("{id}.exit"))
    }
    pub fn logs_dir(&self) -> PathBuf {
        self.root.join("logs")
    }
    pub fn log_path(&self, id: &ContainerId) -> PathBuf {
        self.logs_dir().join(format!("{id}.log"))
    }
    /// The monitor's own stderr; not part of the container's log stream.
    pub fn monitor_log_path(&self, id: &ContainerId) -> PathBuf {
        self.logs_dir().join(format!("{id}.monitor.log"))
    }
}

/// Builds the layout for `root`, creating any missing directories with
/// mode 0700. Existing directories are left alone.
pub fn resolve_layout(root: impl Into<PathBuf>) -> Result<StateDirLayout, ProtocolError> {
    let layout = StateDirLayout::new(root)?;
    let mut builder = DirBuilder::new();
    builder.recursive(true).mode(0o700);
    for dir in [
        layout.root.clone(),
        layout.containers_dir(),
        layout.exits_dir(),
        layout.logs_dir(),
    ] {
        builder.create(&dir)?;
    }
    Ok(layout)
}

static TMP_SEQ: AtomicU64 = AtomicU64::new(0);

/// Writes `bytes` to `path` via a sibling temp file and `rename`, so readers
/// see either the old content or the new one, never a prefix.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = path
        .parent()
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "path has no parent"))?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("file");
    let seq = TMP_SEQ.fetch_add(1, Ordering::Relaxed);
    let tmp = dir.join(format!(".{name}.{}.{seq}.tmp", std::process::id()));
    {
        let mut f = OpenOptions::new().write(true).create(true).truncate(true).mode(0o600).open(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    if let Err(e) = fs::rename(&tmp, path) {
        let _ = fs::remove_file(&tmp);
        return Err(e);
    }
    // Persist the rename itself.
    File::open(dir)?.sync_all()
}

/// Restricts a freshly bound socket to its owner.
pub fn restrict_socket(path: &Path) -> io::Result<()> {
    fs::set_permissions(path, fs::Permissions::from_mode(0o600))
}

pub fn encode_exit_line(report: &ExitReport) -> String {
    let (kind, value) = match report.status {
        ExitStatus::Code(c) => ("code", i64::from(c)),
        ExitStatus::Signal(s) => ("signal", i64::from(s)),
    };
    format!("{} {kind} {value} {}\n", report.container_id, report.finished_at)
}

pub fn parse_exit_line(line: &str) -> Result<ExitReport, ProtocolError> {
    let bad = |why: &str| ProtocolError::Parse(format!("{why}: {line:?}"));
    let body = line.strip_suffix('\n').unwrap_or(line);
    let fields: Vec<&str> = body.split(' ').collect();
    if fields.len() != 4 {
        return Err(bad("expected 4 space-separated fields"));
    }
    let container_id = ContainerId::parse(fields[0]).map_err(|_| bad("bad container id"))?;
    let status = match fields[1] {
        "code" => ExitStatus::Code(fields[2].parse().map_err(|_| bad("exit code not in 0..=255"))?),
        "signal" => {
            let sig: i32 = fields[2].parse().map_err(|_| bad("bad signal number"))?;
            if sig <= 0 {
                return Err(bad("bad signal number"));
            }
            ExitStatus::Signal(sig)
        }
        _ => return Err(bad("kind must be code or signal")),
    };
    let finished_at = fields[3].parse().map_err(|_| bad("bad timestamp"))?;
    Ok(ExitReport { container_id, status, finished_at })
}

/// Atomically writes `exits/<id>.exit`.
pub fn write_exit_report(layout: &StateDirLayout, report: &ExitReport) -> Result<PathBuf, ProtocolError> {
    let path = layout.exit_path(&report.container_id);
    write_atomic(&path, encode_exit_line(report).as_bytes())?;
    Ok(path)
}

pub fn read_exit_report(path: &Path) -> Result<ExitReport, ProtocolError> {
    let text = fs::read_to_string(path)?;
    parse_exit_line(&text)
}

/// Ids of all exit files currently in `exits/`, plus names that do not look
/// like `<id>.exit` (candidates for quarantine). Temp and quarantined files
/// are skipped.
pub fn scan_exits(layout: &StateDirLayout) -> io::Result<(Vec<ContainerId>, Vec<PathBuf>)> {
    let mut ids = Vec::new();
    let mut strays = Vec::new();
    for entry in fs::read_dir(layout.exits_dir())? {
        let entry = entry?;
        let name = entry.file_name();
        let Some(name) = name.to_str() else {
            strays.push(entry.path());
            continue;
        };
        if name.starts_with('.') || name.ends_with(".corrupt") {
            continue;
        }
        match name.strip_suffix(".exit").map(ContainerId::parse) {
            Some(Ok(id)) => ids.push(id),
            _ => strays.push(entry.path()),
        }
    }
    ids.sort();
    Ok((ids, strays))
}

/// Renames `path` to `path.corrupt` so later scans ignore it.
pub fn quarantine(path: &Path) -> io::Result<PathBuf> {
    let mut target = path.as_os_str().to_owned();
    target.push(".corrupt");
    let target = PathBuf::from(target);
    fs::rename(path, &target)?;
    Ok(target)
}

pub fn read_record(path: &Path) -> Result<ContainerRecord, ProtocolError> {
    let bytes = fs::read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| ProtocolError::Parse(e.to_string()))
}

pub fn write_record(layout: &StateDirLayout, record: &ContainerRecord) -> Result<(), ProtocolError> {
    let dir = layout.container_dir(&record.id);
    DirBuilder::new().recursive(true).mode(0o700).create(&dir)?;
    let mut json = serde_json::to_vec_pretty(record).map_err(|e| ProtocolError::Parse(e.to_string()))?;
    json.push(b'\n');
    write_atomic(&layout.record_path(&record.id), &json)?;
    Ok(())
}

/// Content of `daemon.pid`.
pub fn encode_pid_line(identity: &ProcessIdentity) -> String {
    format!("{} {}\n", identity.pid, identity.start_ticks)
}

pub fn parse_pid_line(text: &str) -> Option<ProcessIdentity> {
    let mut it = text.split_whitespace();
    let pid = it.next()?.parse().ok()?;
    let start_ticks = it.next()?.parse().ok()?;
    if it.next().is_some() || pid <= 0 {
        return None;
    }
    Some(ProcessIdentity { pid, start_ticks })
}

pub fn read_daemon_identity(layout: &StateDirLayout) -> Option<ProcessIdentity> {
    fs::read_to_string(layout.daemon_pid()).ok().as_deref().and_then(parse_pid_line)
}

pub const MAX_FRAME_PAYLOAD: usize = 1 << 20;
const FRAME_HEADER: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum StreamTag {
    Stdin = 0,
    Stdout = 1,
    Stderr = 2,
    ExitNotice = 3,
}

impl TryFrom<u8> for StreamTag {
    type Error = ProtocolError;
    fn try_from(b: u8) -> Result<Self, Self::Error> {
        match b {
            0 => Ok(StreamTag::Stdin),
            1 => Ok(StreamTag::Stdout),
            2 => Ok(StreamTag::Stderr),
            3 => Ok(StreamTag::ExitNotice),
            other => Err(ProtocolError::BadTag(other)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub tag: StreamTag,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn new(tag: StreamTag, payload: impl Into<Vec<u8>>) -> Self {
        Frame { tag, payload: payload.into() }
    }

    pub fn exit_notice(report: &ExitReport) -> Self {
        Frame::new(StreamTag::ExitNotice, encode_exit_line(report))
    }

    pub fn encode(&self) -> Result<Vec<u8>, ProtocolError> {
        encode_frame(self.tag, &self.payload)
    }
}

pub fn encode_frame(tag: StreamTag, payload: &[u8]) -> Result<Vec<u8>, ProtocolError> {
    if payload.len() > MAX_FRAME_PAYLOAD {
        return Err(ProtocolError::FrameTooLarge(payload.len()));
    }
    let mut out = Vec::with_capacity(FRAME_HEADER + payload.len());
    out.push(tag as u8);
    out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
    out.extend_from_slice(payload);
    Ok(out)
}

/// Incremental decoder for a byte stream of frames.
#[derive(Debug, Default)]
pub struct FrameDecoder {
    buf: Vec<u8>,
}

impl FrameDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn feed(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Next complete frame, or `None` if more bytes are needed.
    pub fn next_frame(&mut self) -> Result<Option<Frame>, ProtocolError> {
        if self.buf.len() < FRAME_HEADER {
            return Ok(None);
        }
        let tag = StreamTag::try_from(self.buf[0])?;
        let len = u32::from_be_bytes([self.buf[1], self.buf[2], self.buf[3], self.buf[4]]) as usize;
        if len > MAX_FRAME_PAYLOAD {
            return Err(ProtocolError::FrameTooLarge(len));
        }
        if self.buf.len() < FRAME_HEADER + len {
            return Ok(None);
        }
        let payload = self.buf[FRAME_HEADER..FRAME_HEADER + len].to_vec();
        self.buf.drain(..FRAME_HEADER + len);
        Ok(Some(Frame { tag, payload }))
    }

    /// Bytes buffered but not yet forming a complete frame.
    pub fn pending(&self) -> usize {
        self.buf.len()
    }

    pub fn finish(self) -> Result<(), ProtocolError> {
        match self.buf.len() {
            0 => Ok(()),
            n => Err(ProtocolError::Truncated(n)),
        }
    }
}

/// Decodes a complete concatenation of frames.
pub fn decode_frames(bytes: &[u8]) -> Result<Vec<Frame>, ProtocolError> {
    let mut dec = FrameDecoder::new();
    dec.feed(bytes);
    let mut frames = Vec::new();
    while let Some(frame) = dec.next_frame()? {
        frames.push(frame);
    }
    dec.finish()?;
    Ok(frames)
}

/// Reads one frame; `Ok(None)` on a clean end of stream.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<Frame>, ProtocolError> {
    let mut header = [0u8; FRAME_HEADER];
    let mut got = 0;
    while got < FRAME_HEADER {
        match r.read(&mut header[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(ProtocolError::Truncated(got)),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let tag = StreamTag::try_from(header[0])?;
    let len = u32::from_be_bytes([header[1], header[2], header[3], header[4]]) as usize;
    if len > MAX_FRAME_PAYLOAD {
        return Err(ProtocolError::FrameTooLarge(len));
    }
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => ProtocolError::Truncated(FRAME_HEADER),
        _ => e.into(),
    })?;
    Ok(Some(Frame { tag, payload }))
}

pub fn write_frame<W: Write>(w: &mut W, tag: StreamTag, payload: &[u8]) -> Result<(), ProtocolError> {
    w.write_all(&encode_frame(tag, payload)?)?;
    Ok(())
}

/// Signal assignments. Container-bound signals go to the container's
/// process group; `exit_notify` goes from a monitor to the daemon.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignalPlan {
    pub exit_notify: i32,
    pub stop: i32,
    pub pause: i32,
    pub unpause: i32,
    pub kill: i32,
}

impl Default for SignalPlan {
    fn default() -> Self {
        let rt = libc::SIGRTMIN() + 10;
        let exit_notify = if rt <= libc::SIGRTMAX() { rt } else { libc::SIGUSR1 };
        SignalPlan {
            exit_notify,
            stop: libc::SIGTERM,
            pause: libc::SIGSTOP,
            unpause: libc::SIGCONT,
            kill: libc::SIGKILL,
        }
    }
}

impl SignalPlan {
    pub fn with_exit_notify(exit_notify: i32) -> Result<Self, ProtocolError> {
        let plan = SignalPlan { exit_notify, ..SignalPlan::default() };
        plan.validate()?;
        Ok(plan)
    }

    pub fn container_signals(&self) -> [i32; 4] {
        [self.stop, self.pause, self.unpause, self.kill]
    }

    pub fn validate(&self) -> Result<(), ProtocolError> {
        let valid_range = self.exit_notify > 0 && self.exit_notify <= libc::SIGRTMAX();
        let uncatchable = self.exit_notify == libc::SIGKILL || self.exit_notify == libc::SIGSTOP;
        if !valid_range || uncatchable || self.container_signals().contains(&self.exit_notify) {
            return Err(ProtocolError::SignalCollision(self.exit_notify));
        }
        Ok(())
    }
}

/// Requests on the daemon socket. One JSON object per line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Request {
    Ps,
    Run { spec: ContainerSpec },
    Start { id: ContainerId },
    Stop {
        id: ContainerId,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        grace_ms: Option<u64>,
    },
    Kill { id: ContainerId },
    Pause { id: ContainerId },
    Unpause { id: ContainerId },
    Restart { id: ContainerId },
    Wait { id: ContainerId },
    Top { id: ContainerId },
    Stats { id: ContainerId },
    Logs { id: ContainerId },
    Attach { id: ContainerId },
    Exec { id: ContainerId },
    Rm { id: ContainerId },
    Status,
    Shutdown,
    /// Sent by a monitor once its container is running.
    Launched {
        id: ContainerId,
        monitor: ProcessIdentity,
        container: ProcessIdentity,
    },
    /// Sent by the launch shim when the container could not be started.
    LaunchFailed {
        id: ContainerId,
        error: String,
        #[serde(default)]
        errno: Option<i32>,
    },
}

impl Request {
    pub const OPS: &'static [&'static str] = &[
        "ps", "run", "start", "stop", "kill", "pause", "unpause", "restart", "wait", "top", "stats",
        "logs", "attach", "exec", "rm", "status", "shutdown", "launched", "launch_failed",
    ];
}

/// Machine-readable error codes carried in `Response::error`.
pub mod codes {
    pub const UNKNOWN_OP: &str = "unknown_op";
    pub const BAD_REQUEST: &str = "bad_request";
    pub const NOT_FOUND: &str = "not_found";
    pub const INVALID_STATE: &str = "invalid_state";
    pub const NOT_RUNNING: &str = "not_running";
    pub const RM_RUNNING: &str = "rm_running";
    pub const SPAWN_ERROR: &str = "spawn_error";
    pub const HANDSHAKE_TIMEOUT: &str = "handshake_timeout";
    pub const SIGNAL_FAILURE: &str = "signal_failure";
    pub const ALREADY_EXISTS: &str = "already_exists";
    pub const STALE_LAUNCH: &str = "stale_launch";
    pub const IO_ERROR: &str = "io_error";
    pub const CONTAINER_NOT_RUNNING: &str = "container_not_running";
    pub const TOO_MANY_CONNECTIONS: &str = "too_many_connections";
}

/// `{"ok": bool, "error": optional code, "message": optional text, ...payload}`
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
    #[serde(flatten)]
    pub body: serde_json::Map<String, serde_json::Value>,
}

impl Response {
    pub fn ok() -> Self {
        Response { ok: true, error: None, message: None, body: Default::default() }
    }

    pub fn with_body<T: Serialize>(payload: &T) -> Self {
        let body = match serde_json::to_value(payload) {
            Ok(serde_json::Value::Object(map)) => map,
            Ok(other) => {
                let mut map = serde_json::Map::new();
                map.insert("value".into(), other);
                map
            }
            Err(e) => return Response::err(codes::IO_ERROR, e.to_string()),
        };
        Response { ok: true, error: None, message: None, body }
    }

    pub fn err(code: &str, message: impl Into<String>) -> Self {
        Response {
            ok: false,
            error: Some(code.to_owned()),
            message: Some(message.into()),
            body: Default::default(),
        }
    }

    pub fn payload<T: serde::de::DeserializeOwned>(&self) -> Result<T, serde_json::Error> {
        serde_json::from_value(serde_json::Value::Object(self.body.clone()))
    }

    pub fn to_line(&self) -> String {
        let mut s = serde_json::to_string(self).expect("response serializes");
        s.push('\n');
        s
    }
}

/// Parses one request line. Unknown ops and malformed requests come back as
/// ready-made error responses.
pub fn parse_request(line: &str) -> Result<Request, Response> {
    let value: serde_json::Value =
        serde_json::from_str(line).map_err(|e| Response::err(codes::BAD_REQUEST, e.to_string()))?;
    let op = value.get("op").and_then(|v| v.as_str()).unwrap_or_default();
    if !Request::OPS.contains(&op) {
        return Err(Response::err(codes::UNKNOWN_OP, format!("unknown op {op:?}")));
    }
    serde_json::from_value(value).map_err(|e| Response::err(codes::BAD_REQUEST, e.to_string()))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunReply {
    pub id: ContainerId,
    pub pid: i32,
    pub monitor_pid: i32,
    pub socket: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SocketReply {
    pub socket: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WaitReply {
    pub report: String,
    #[serde(default)]
    pub exit_code: Option<u8>,
    #[serde(default)]
    pub term_signal: Option<i32>,
    #[serde(default)]
    pub exit_unknown: bool,
}

impl WaitReply {
    pub fn from_report(report: &ExitReport, exit_unknown: bool) -> Self {
        WaitReply {
            report: encode_exit_line(report),
            exit_code: report.exit_code(),
            term_signal: report.term_signal(),
            exit_unknown,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PsReply {
    pub containers: Vec<ContainerRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StatusReply {
    pub pid: i32,
    pub mode: crate::model::SupervisionMode,
    /// Lock acquisition through end of reconciliation, in milliseconds.
    pub restore_ms: f64,
    pub containers: usize,
    pub running: usize,
}

/// Requests on a monitor socket. `attach`, `exec` and `logs` switch the
/// connection to frames after the JSON reply line.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum MonitorRequest {
    Attach {
        #[serde(default)]
        stdin: bool,
        /// Replay the log before streaming live output.
        #[serde(default)]
        logs: bool,
    },
    Exec {
        argv: Vec<String>,
        #[serde(default)]
        env: Vec<String>,
    },
    Wait,
    Logs {
        #[serde(default)]
        follow: bool,
    },
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SupervisionMode;
    use proptest::prelude::*;

    fn id() -> ContainerId {
        ContainerId::parse("aabbccddeeff0011").unwrap()
    }

    #[test]
    fn exit_line_golden_bytes() {
        let code = ExitReport { container_id: id(), status: ExitStatus::Code(0), finished_at: 1_700_000_000_000 };
        assert_eq!(encode_exit_line(&code), "aabbccddeeff0011 code 0 1700000000000\n");
        let sig = ExitReport { container_id: id(), status: ExitStatus::Signal(9), finished_at: 42 };
        assert_eq!(encode_exit_line(&sig), "aabbccddeeff0011 signal 9 42\n");
    }

    #[test]
    fn exit_line_rejects_malformed() {
        for bad in [
            "aabbccddeeff0011 code 0\n",
            "aabbccddeeff0011 code 0 1 extra\n",
            "aabbccddeeff0011  code 0 1\n",
            "aabbccddeeff0011 code 256 1\n",
            "aabbccddeeff0011 signal 0 1\n",
            "aabbccddeeff0011 status 0 1\n",
            "AABBCCDDEEFF0011 code 0 1\n",
            "aabbccddeeff0011 code 0 -1\n",
            "",
        ] {
            assert!(parse_exit_line(bad).is_err(), "{bad:?}");
        }
    }

    #[test]
    fn exit_file_write_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let layout = resolve_layout(dir.path()).unwrap();
        let report = ExitReport { container_id: id(), status: ExitStatus::Code(3), finished_at: 5 };
        let p1 = write_exit_report(&layout, &report).unwrap();
        let first = fs::read(&p1).unwrap();
        let p2 = write_exit_report(&layout, &report).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(p1, dir.path().join("exits/aabbccddeeff0011.exit"));
        assert_eq!(fs::read(&p2).unwrap(), first);
        assert_eq!(read_exit_report(&p1).unwrap(), report);
        // No temp files left behind.
        let names: Vec<_> = fs::read_dir(layout.exits_dir()).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(names.len(), 1);
    }

    #[test]
    fn concurrent_rewrites_are_never_torn() {
        let dir = tempfile::tempdir().unwrap();
        let layout = resolve_layout(dir.path()).unwrap();
        let report = |i: u64| ExitReport {
            container_id: id(),
            status: if i.is_multiple_of(2) { ExitStatus::Code((i % 256) as u8) } else { ExitStatus::Signal(9) },
            finished_at: i * 1_000_003,
        };
        let path = write_exit_report(&layout, &report(0)).unwrap();
        let done = std::sync::atomic::AtomicBool::new(false);
        std::thread::scope(|s| {
            let reader = s.spawn(|| {
                let mut reads = 0;
                while !done.load(std::sync::atomic::Ordering::Relaxed) {
                    read_exit_report(&path).expect("torn exit file");
                    reads += 1;
                }
                reads
            });
            let writers: Vec<_> = (0..4u64)
                .map(|w| {
                    let layout = &layout;
                    s.spawn(move || {
                        for i in 0..250 {
                            write_exit_report(layout, &report(w * 250 + i)).unwrap();
                        }
                    })
                })
                .collect();
            for w in writers {
                w.join().unwrap();
            }
            done.store(true, std::sync::atomic::Ordering::Relaxed);
            assert!(reader.join().unwrap() > 0);
        });
    }

    #[test]
    fn three_field_file_is_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.exit");
        fs::write(&path, "aabbccddeeff0011 code 0\n").unwrap();
        assert!(matches!(read_exit_report(&path), Err(ProtocolError::Parse(_))));
    }

    #[test]
    fn layout_paths_and_creation() {
        let layout = StateDirLayout::new("/tmp/h").unwrap();
        assert_eq!(layout.exits_dir(), PathBuf::from("/tmp/h/exits"));
        assert_eq!(layout.daemon_sock(), PathBuf::from("/tmp/h/daemon.sock"));
        assert_eq!(layout.monitor_sock(&id()), PathBuf::from("/tmp/h/containers/aabbccddeeff0011/monitor.sock"));
        assert_eq!(layout.log_path(&id()), PathBuf::from("/tmp/h/logs/aabbccddeeff0011.log"));
        assert!(matches!(resolve_layout("relative/root"), Err(ProtocolError::RelativeRoot(_))));

        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().join("state");
        let a = resolve_layout(&root).unwrap();
        let mode = fs::metadata(a.exits_dir()).unwrap().permissions().mode() & 0o777;
        assert_eq!(mode, 0o700);
        let b = resolve_layout(&root).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn scan_exits_skips_temp_and_flags_strays() {
        let dir = tempfile::tempdir().unwrap();
        let layout = resolve_layout(dir.path()).unwrap();
        fs::write(layout.exit_path(&id()), "x").unwrap();
        fs::write(layout.exits_dir().join(".aabbccddeeff0011.exit.1.tmp"), "x").unwrap();
        fs::write(layout.exits_dir().join("junk.exit"), "x").unwrap();
        fs::write(layout.exits_dir().join("old.exit.corrupt"), "x").unwrap();
        let (ids, strays) = scan_exits(&layout).unwrap();
        assert_eq!(ids, vec![id()]);
        assert_eq!(strays, vec![layout.exits_dir().join("junk.exit")]);
        let q = quarantine(&strays[0]).unwrap();
        assert!(q.to_str().unwrap().ends_with("junk.exit.corrupt"));
        assert!(scan_exits(&layout).unwrap().1.is_empty());
    }

    #[test]
    fn frame_golden_bytes() {
        assert_eq!(encode_frame(StreamTag::Stdout, b"hi").unwrap(), [0x01, 0, 0, 0, 0x02, 0x68, 0x69]);
        assert_eq!(encode_frame(StreamTag::ExitNotice, b"").unwrap(), [0x03, 0, 0, 0, 0]);
    }

    #[test]
    fn frame_errors() {
        let big = vec![0u8; MAX_FRAME_PAYLOAD + 1];
        assert!(matches!(encode_frame(StreamTag::Stdout, &big), Err(ProtocolError::FrameTooLarge(_))));
        assert!(encode_frame(StreamTag::Stdout, &big[..MAX_FRAME_PAYLOAD]).is_ok());
        assert!(matches!(decode_frames(&[7, 0, 0, 0, 0]), Err(ProtocolError::BadTag(7))));
        assert!(matches!(decode_frames(&[1, 0, 0, 0, 2, b'h']), Err(ProtocolError::Truncated(6))));
        assert!(matches!(decode_frames(&[1, 0, 0x20, 0, 0]), Err(ProtocolError::FrameTooLarge(_))));
        let mut cursor = io::Cursor::new(vec![1u8, 0, 0]);
        assert!(matches!(read_frame(&mut cursor), Err(ProtocolError::Truncated(3))));
        let mut empty = io::Cursor::new(Vec::<u8>::new());
        assert!(read_frame(&mut empty).unwrap().is_none());
    }

    #[test]
    fn incremental_decoder_reports_partial_tail() {
        let mut bytes = encode_frame(StreamTag::Stderr, b"abc").unwrap();
        bytes.extend(encode_frame(StreamTag::Stdout, b"de").unwrap());
        let mut dec = FrameDecoder::new();
        dec.feed(&bytes[..4]);
        assert!(dec.next_frame().unwrap().is_none());
        dec.feed(&bytes[4..10]);
        assert_eq!(dec.next_frame().unwrap(), Some(Frame::new(StreamTag::Stderr, "abc")));
        assert!(dec.next_frame().unwrap().is_none());
        assert_eq!(dec.pending(), 2);
        assert!(matches!(dec.finish(), Err(ProtocolError::Truncated(2))));
    }

    #[test]
    fn signal_plan_defaults() {
        let plan = SignalPlan::default();
        assert_eq!(plan.exit_notify, libc::SIGRTMIN() + 10);
        assert_eq!(plan.pause, libc::SIGSTOP);
        assert_eq!(plan.stop, libc::SIGTERM);
        plan.validate().unwrap();
        assert!(SignalPlan::with_exit_notify(libc::SIGUSR1).is_ok());
        for clash in [libc::SIGTERM, libc::SIGSTOP, libc::SIGCONT, libc::SIGKILL, 0, -1, 1000] {
            assert!(SignalPlan::with_exit_notify(clash).is_err(), "{clash}");
        }
    }

    #[test]
    fn unknown_op_and_bad_request() {
        let err = parse_request(r#"{"op":"frobnicate"}"#).unwrap_err();
        assert_eq!(err.error.as_deref(), Some("unknown_op"));
        assert!(!err.ok);
        let err = parse_request(r#"{"op":"kill"}"#).unwrap_err();
        assert_eq!(err.error.as_deref(), Some("bad_request"));
        let err = parse_request("not json").unwrap_err();
        assert_eq!(err.error.as_deref(), Some("bad_request"));
        let req = parse_request(r#"{"op":"kill","id":"aabbccddeeff0011"}"#).unwrap();
        assert_eq!(req, Request::Kill { id: id() });
        assert_eq!(parse_request(r#"{"op":"ps"}"#).unwrap(), Request::Ps);
    }

    #[test]
    fn response_wire_shape() {
        let r = Response::err(codes::UNKNOWN_OP, "nope");
        let line = r.to_line();
        assert!(line.ends_with('\n'));
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        assert_eq!(v["ok"], false);
        assert_eq!(v["error"], "unknown_op");

        let reply = SocketReply { socket: "/x/monitor.sock".into() };
        let r = Response::with_body(&reply);
        let v: serde_json::Value = serde_json::from_str(&r.to_line()).unwrap();
        assert_eq!(v["ok"], true);
        assert_eq!(v["socket"], "/x/monitor.sock");
        assert_eq!(r.payload::<SocketReply>().unwrap(), reply);
    }

    #[test]
    fn pid_line() {
        let ident = ProcessIdentity { pid: 12, start_ticks: 345 };
        assert_eq!(encode_pid_line(&ident), "12 345\n");
        assert_eq!(parse_pid_line("12 345\n"), Some(ident));
        assert_eq!(parse_pid_line("12"), None);
        assert_eq!(parse_pid_line("-1 3"), None);
    }

    #[test]
    fn status_reply_round_trip() {
        let s = StatusReply { pid: 1, mode: SupervisionMode::Lazy, restore_ms: 1.5, containers: 2, running: 1 };
        let r = Response::with_body(&s);
        assert_eq!(r.payload::<StatusReply>().unwrap(), s);
    }

    fn arb_report() -> impl Strategy<Value = ExitReport> {
        (
            any::<u64>(),
            prop_oneof![any::<u8>().prop_map(ExitStatus::Code), (1..=64i32).prop_map(ExitStatus::Signal)],
            any::<u64>(),
        )
            .prop_map(|(bits, status, finished_at)| ExitReport {
                container_id: ContainerId::from_u64(bits),
                status,
                finished_at,
            })
    }

    fn arb_tag() -> impl Strategy<Value = StreamTag> {
        prop::sample::select(vec![StreamTag::Stdin, StreamTag::Stdout, StreamTag::Stderr, StreamTag::ExitNotice])
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn exit_line_round_trip(report in arb_report()) {
            let line = encode_exit_line(&report);
            prop_assert!(line.ends_with('\n'));
            prop_assert_eq!(line.trim_end().split(' ').count(), 4);
            prop_assert_eq!(parse_exit_line(&line).unwrap(), report);
        }

        #[test]
        fn frame_sequence_round_trip(
            frames in prop::collection::vec((arb_tag(), prop::collection::vec(any::<u8>(), 0..256)), 0..100)
        ) {
            let mut stream = Vec::new();
            for (tag, payload) in &frames {
                stream.extend(encode_frame(*tag, payload).unwrap());
            }
            let decoded = decode_frames(&stream).unwrap();
            let expected: Vec<Frame> = frames.into_iter().map(|(t, p)| Frame::new(t, p)).collect();
            prop_assert_eq!(&decoded, &expected);

            // Same stream through the blocking reader.
            let mut cursor = io::Cursor::new(stream);
            let mut via_reader = Vec::new();
            while let Some(f) = read_frame(&mut cursor).unwrap() {
                via_reader.push(f);
            }
            prop_assert_eq!(via_reader, expected);
        }

        #[test]
        fn signal_plan_disjoint(sig in 1..=64i32) {
            if let Ok(plan) = SignalPlan::with_exit_notify(sig) {
                prop_assert!(!plan.container_signals().contains(&plan.exit_notify));
            }
        }
    }
}
