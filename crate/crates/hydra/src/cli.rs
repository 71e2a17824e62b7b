//! The `hydra` command line.
//!
//! Exit codes: 0 on success, 1 for user errors (bad arguments, unknown
//! container, illegal state), 2 when the daemon cannot be reached. `run`
//! in the foreground, `exec` and `attach` exit with the code of the process
//! they followed.

use std::ffi::OsString;
use std::fs::OpenOptions;
use std::io::{self, Read, Write};
use std::os::unix::process::CommandExt;
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand};
use hydra_core::client::{ClientError, DaemonClient, FrameStream, LogSource, MonitorClient};
use hydra_core::daemon::{self, DaemonConfig, DaemonError};
use hydra_core::model::{ContainerId, ContainerRecord, ContainerSpec, ContainerState, ExitReport, Isolation};
use hydra_core::protocol::{codes, parse_exit_line, read_daemon_identity, StateDirLayout, StreamTag, WaitReply};
use hydra_core::sandbox;
use hydra_core::SupervisionMode;
use nix::sys::signal::{SigSet, Signal};

#[derive(Parser, Debug)]
#[command(name = "hydra", version, about = "Run containers that outlive their daemon")]
pub struct Cli {
    /// State directory [default: /tmp/hydra-<uid>]
    #[arg(long, global = true, env = "HYDRA_STATE_DIR")]
    pub state_dir: Option<PathBuf>,
    /// Machine-readable output.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Subcommand, Debug)]
pub enum Cmd {
    /// Manage the daemon.
    #[command(subcommand)]
    Daemon(DaemonCmd),
    /// Create and start a container.
    Run(RunArgs),
    /// Start an exited container again with its original spec.
    Start { id: String },
    /// SIGTERM, then SIGKILL after the grace period.
    Stop {
        id: String,
        #[arg(long)]
        grace_ms: Option<u64>,
    },
    /// SIGKILL the container's process group.
    Kill { id: String },
    /// Freeze every process in the container.
    Pause { id: String },
    /// Resume a paused container.
    Unpause { id: String },
    /// Stop the container if running, then launch it again under the same id.
    Restart { id: String },
    /// Block until the container exits and print its exit code.
    Wait { id: String },
    /// List the container's processes.
    Top { id: String },
    /// CPU and memory usage, sampled twice.
    Stats { id: String },
    /// Print captured output.
    Logs {
        id: String,
        /// Keep streaming until the container exits.
        #[arg(short, long)]
        follow: bool,
    },
    /// Delete an exited container.
    Rm { id: String },
    /// Bridge this terminal's stdio to the container.
    Attach {
        id: String,
        /// Do not forward stdin.
        #[arg(long)]
        no_stdin: bool,
    },
    /// Run another command inside a running container.
    Exec {
        id: String,
        #[arg(short = 'i', long)]
        interactive: bool,
        #[arg(short = 'e', long = "env")]
        env: Vec<String>,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, required = true, num_args = 1..)]
        command: Vec<String>,
    },
    /// List containers.
    Ps,
}

#[derive(Subcommand, Debug)]
pub enum DaemonCmd {
    /// Start the daemon (detached unless --foreground).
    Start(DaemonStartArgs),
    /// Shut down the daemon; containers keep running in lazy and decoupled modes.
    Stop,
    /// Print pid, mode and container counts.
    Status,
}

#[derive(Args, Debug, Clone)]
pub struct DaemonStartArgs {
    /// Stay attached instead of detaching into the background.
    #[arg(long)]
    pub foreground: bool,
    /// coupled, lazy or decoupled
    #[arg(long, default_value = "decoupled")]
    pub mode: SupervisionMode,
    #[arg(long, default_value_t = daemon::DEFAULT_POLL_INTERVAL_MS)]
    pub poll_interval_ms: u64,
    #[arg(long, default_value_t = daemon::DEFAULT_HANDSHAKE_TIMEOUT_MS)]
    pub handshake_timeout_ms: u64,
    /// Seed container ids (reproducible runs).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Stop appending to a container log past this size.
    #[arg(long)]
    pub max_log_bytes: Option<u64>,
}

#[derive(Args, Debug)]
pub struct RunArgs {
    /// Print the id and return instead of following the container.
    #[arg(short, long)]
    pub detach: bool,
    /// New PID, mount and UTS namespaces.
    #[arg(long)]
    pub isolate: bool,
    /// Forward stdin.
    #[arg(short = 'i', long)]
    pub interactive: bool,
    #[arg(short = 'e', long = "env")]
    pub env: Vec<String>,
    #[arg(short = 'w', long)]
    pub workdir: Option<PathBuf>,
    #[arg(long)]
    pub stop_grace_ms: Option<u64>,
    /// Leave the container dead if its monitor dies.
    #[arg(long)]
    pub no_restart_on_monitor_loss: bool,
    /// Ctrl-C kills the container instead of stopping it.
    #[arg(long)]
    pub sigint_kills: bool,
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, required = true, num_args = 1..)]
    pub command: Vec<String>,
}

#[derive(Debug)]
pub enum CliError {
    User(String),
    Transport(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::User(_) => 1,
            CliError::Transport(_) => 2,
        }
    }
}

impl From<ClientError> for CliError {
    fn from(e: ClientError) -> Self {
        if e.is_transport() {
            CliError::Transport(e.to_string())
        } else {
            CliError::User(e.to_string())
        }
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Transport(e.to_string())
    }
}

type CliResult = Result<i32, CliError>;

/// `/tmp/hydra-<uid>` unless overridden.
pub fn default_state_dir() -> PathBuf {
    // SAFETY: getuid has no failure mode.
    let uid = unsafe { libc::getuid() };
    PathBuf::from(format!("/tmp/hydra-{uid}"))
}

fn absolute(path: PathBuf) -> PathBuf {
    if path.is_absolute() {
        path
    } else {
        std::env::current_dir().map(|d| d.join(&path)).unwrap_or(path)
    }
}

/// Entry point; returns the process exit code.
pub fn main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run_cli(cli) {
        Ok(code) => code,
        Err(e) => {
            match &e {
                CliError::User(m) => eprintln!("hydra: {m}"),
                CliError::Transport(m) => eprintln!("hydra: {m}"),
            }
            e.exit_code()
        }
    }
}

struct Ctx {
    layout: StateDirLayout,
    json: bool,
}

impl Ctx {
    fn client(&self) -> DaemonClient {
        DaemonClient::new(self.layout.daemon_sock())
    }
}

fn parse_id(s: &str) -> Result<ContainerId, CliError> {
    ContainerId::parse(s).map_err(|e| CliError::User(e.to_string()))
}

fn print_json<T: serde::Serialize>(value: &T) -> CliResult {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::User(e.to_string()))?;
    println!("{text}");
    Ok(0)
}

pub fn run_cli(cli: Cli) -> CliResult {
    let state_dir = absolute(cli.state_dir.unwrap_or_else(default_state_dir));
    let layout = StateDirLayout::new(&state_dir).map_err(|e| CliError::User(e.to_string()))?;
    let ctx = Ctx { layout, json: cli.json };
    let client = ctx.client();
    match cli.command {
        Cmd::Daemon(DaemonCmd::Start(args)) => daemon_start(&ctx, args),
        Cmd::Daemon(DaemonCmd::Stop) => daemon_stop(&ctx),
        Cmd::Daemon(DaemonCmd::Status) => {
            let st = client.status()?;
            if ctx.json {
                return print_json(&st);
            }
            println!(
                "pid {}  mode {}  restore {:.3} ms  containers {}  running {}",
                st.pid,
                st.mode.as_str(),
                st.restore_ms,
                st.containers,
                st.running
            );
            Ok(0)
        }
        Cmd::Run(args) => run(&ctx, args),
        Cmd::Start { id } => {
            let reply = client.start(&parse_id(&id)?)?;
            println!("{}", reply.id);
            Ok(0)
        }
        Cmd::Restart { id } => {
            let reply = client.restart(&parse_id(&id)?)?;
            println!("{}", reply.id);
            Ok(0)
        }
        Cmd::Stop { id, grace_ms } => simple(&parse_id(&id)?, |id| client.stop(id, grace_ms)),
        Cmd::Kill { id } => simple(&parse_id(&id)?, |id| client.kill(id)),
        Cmd::Pause { id } => simple(&parse_id(&id)?, |id| client.pause(id)),
        Cmd::Unpause { id } => simple(&parse_id(&id)?, |id| client.unpause(id)),
        Cmd::Rm { id } => simple(&parse_id(&id)?, |id| client.rm(id)),
        Cmd::Wait { id } => {
            let reply = client.wait(&parse_id(&id)?)?;
            if ctx.json {
                return print_json(&reply);
            }
            println!("{}", wait_code(&reply));
            Ok(0)
        }
        Cmd::Ps => {
            let ps = client.ps()?;
            if ctx.json {
                return print_json(&ps);
            }
            print!("{}", render_ps(&ps.containers));
            Ok(0)
        }
        Cmd::Top { id } => {
            let resp = client.request(&hydra_core::protocol::Request::Top { id: parse_id(&id)? })?;
            let body = ok_body(resp)?;
            if ctx.json {
                return print_json(&body);
            }
            let rows: Vec<sandbox::ProcRow> =
                serde_json::from_value(body["rows"].clone()).map_err(|e| CliError::Transport(e.to_string()))?;
            print!("{}", render_top(&rows));
            Ok(0)
        }
        Cmd::Stats { id } => {
            let resp = client.request(&hydra_core::protocol::Request::Stats { id: parse_id(&id)? })?;
            let body = ok_body(resp)?;
            if ctx.json {
                return print_json(&body);
            }
            println!("{:<6} {:>8} {:>12}", "PIDS", "CPU%", "MEM");
            println!(
                "{:<6} {:>8.2} {:>12}",
                body["pids"],
                body["cpu_percent"].as_f64().unwrap_or_default(),
                human_bytes(body["rss_bytes"].as_u64().unwrap_or_default())
            );
            Ok(0)
        }
        Cmd::Logs { id, follow } => logs(&ctx, &parse_id(&id)?, follow),
        Cmd::Attach { id, no_stdin } => {
            let socket = client.attach_socket(&parse_id(&id)?)?;
            let stream = MonitorClient::new(socket).attach(!no_stdin, false)?;
            if !no_stdin {
                forward_stdin(&stream)?;
            }
            let report = pump_frames(stream)?;
            Ok(report.map(|r| r.status.as_shell_code()).unwrap_or(0))
        }
        Cmd::Exec { id, interactive, env, command } => {
            let socket = client.exec_socket(&parse_id(&id)?)?;
            let stream = MonitorClient::new(socket).exec(command, env)?;
            if interactive {
                forward_stdin(&stream)?;
            }
            let report = pump_frames(stream)?;
            report
                .map(|r| r.status.as_shell_code())
                .ok_or_else(|| CliError::Transport("exec stream ended without a status".into()))
        }
    }
}

fn ok_body(resp: hydra_core::protocol::Response) -> Result<serde_json::Value, CliError> {
    if !resp.ok {
        return Err(CliError::User(format!(
            "{}: {}",
            resp.error.unwrap_or_default(),
            resp.message.unwrap_or_default()
        )));
    }
    Ok(serde_json::Value::Object(resp.body))
}

fn simple(id: &ContainerId, op: impl FnOnce(&ContainerId) -> Result<(), ClientError>) -> CliResult {
    op(id)?;
    println!("{id}");
    Ok(0)
}

pub fn wait_code(reply: &WaitReply) -> i32 {
    match (reply.exit_code, reply.term_signal) {
        (Some(code), _) => code as i32,
        (None, Some(sig)) => 128 + sig,
        (None, None) => 255,
    }
}

fn state_label(rec: &ContainerRecord) -> String {
    match rec.state {
        ContainerState::Exited(_) if rec.exit_unknown => "exited(unknown)".into(),
        ContainerState::Exited(status) => match (status.exit_code(), status.term_signal()) {
            (Some(c), _) => format!("exited({c})"),
            (_, Some(s)) => format!("exited(signal {s})"),
            _ => "exited".into(),
        },
        other => other.name().into(),
    }
}

pub fn render_ps(records: &[ContainerRecord]) -> String {
    let mut out = format!("{:<16}  {:<18}  {:>7}  {:>7}  {:>8}  COMMAND\n", "ID", "STATE", "PID", "MONITOR", "RESTARTS");
    for r in records {
        let pid = r.container.map(|c| c.pid.to_string()).unwrap_or_else(|| "-".into());
        let mon = r.monitor.map(|c| c.pid.to_string()).unwrap_or_else(|| "-".into());
        out.push_str(&format!(
            "{:<16}  {:<18}  {:>7}  {:>7}  {:>8}  {}\n",
            r.id,
            state_label(r),
            pid,
            mon,
            r.restart_count,
            r.spec.command.join(" ")
        ));
    }
    out
}

pub fn render_top(rows: &[sandbox::ProcRow]) -> String {
    let hz = sandbox::clock_ticks_per_sec().max(1);
    let mut out = format!("{:>7} {:>7} {:<2} {:>10} {:>9}  COMMAND\n", "PID", "PPID", "S", "RSS", "TIME");
    for r in rows {
        out.push_str(&format!(
            "{:>7} {:>7} {:<2} {:>10} {:>8.2}s  {}\n",
            r.pid,
            r.ppid,
            r.state,
            human_bytes(r.rss_bytes),
            r.cpu_ticks as f64 / hz as f64,
            r.command
        ));
    }
    out
}

fn human_bytes(n: u64) -> String {
    const UNITS: [&str; 4] = ["B", "KiB", "MiB", "GiB"];
    let mut v = n as f64;
    let mut u = 0;
    while v >= 1024.0 && u < UNITS.len() - 1 {
        v /= 1024.0;
        u += 1;
    }
    if u == 0 {
        format!("{n}B")
    } else {
        format!("{v:.1}{}", UNITS[u])
    }
}

/// Copies frames to stdout/stderr until the exit notice or end of stream.
pub fn pump_frames(mut stream: FrameStream) -> Result<Option<ExitReport>, CliError> {
    let stdout = io::stdout();
    let stderr = io::stderr();
    while let Some(frame) = stream.next_frame()? {
        match frame.tag {
            StreamTag::Stdout => {
                let mut out = stdout.lock();
                out.write_all(&frame.payload)?;
                out.flush()?;
            }
            StreamTag::Stderr => {
                let mut err = stderr.lock();
                err.write_all(&frame.payload)?;
                err.flush()?;
            }
            StreamTag::ExitNotice => {
                let line = String::from_utf8_lossy(&frame.payload);
                return parse_exit_line(&line).map(Some).map_err(|e| CliError::Transport(e.to_string()));
            }
            StreamTag::Stdin => {}
        }
    }
    Ok(None)
}

fn forward_stdin(stream: &FrameStream) -> Result<(), CliError> {
    let mut writer = stream.stdin_writer()?;
    thread::spawn(move || {
        let mut stdin = io::stdin().lock();
        let mut buf = vec![0u8; 64 * 1024];
        loop {
            match stdin.read(&mut buf) {
                Ok(0) | Err(_) => break,
                Ok(n) => {
                    if writer.send(&buf[..n]).is_err() {
                        return;
                    }
                }
            }
        }
        let _ = writer.close();
    });
    Ok(())
}

fn run(ctx: &Ctx, args: RunArgs) -> CliResult {
    let mut spec = ContainerSpec::new(args.command);
    spec.env = args.env;
    spec.working_dir = args.workdir.map(absolute);
    if args.isolate {
        spec.isolation = Isolation::Namespaces;
    }
    if let Some(g) = args.stop_grace_ms {
        spec.stop_grace_ms = g;
    }
    spec.restart_on_monitor_loss = !args.no_restart_on_monitor_loss;
    spec.validate().map_err(|e| CliError::User(e.to_string()))?;

    let client = ctx.client();
    // Block Ctrl-C before any thread exists so only the forwarder sees it.
    let mut forwarded = SigSet::empty();
    if !args.detach {
        forwarded.add(Signal::SIGINT);
        forwarded.add(Signal::SIGTERM);
        let _ = forwarded.thread_block();
    }
    let reply = client.run(spec)?;
    if args.detach {
        if ctx.json {
            return print_json(&reply);
        }
        println!("{}", reply.id);
        return Ok(0);
    }

    let id = reply.id.clone();
    {
        let client = client.clone();
        let id = id.clone();
        let kill = args.sigint_kills;
        thread::spawn(move || {
            while forwarded.wait().is_ok() {
                let _ = if kill { client.kill(&id) } else { client.stop(&id, None) };
            }
        });
    }

    let report = match MonitorClient::new(&reply.socket).attach(args.interactive, true) {
        Ok(stream) => {
            if args.interactive {
                forward_stdin(&stream)?;
            }
            pump_frames(stream)?
        }
        // Already gone: fall back to the daemon's copy of the log.
        Err(e) if e.code() == Some(codes::CONTAINER_NOT_RUNNING) || e.is_transport() => {
            replay_daemon_logs(&client, &id)?;
            None
        }
        Err(e) => return Err(e.into()),
    };
    match report {
        Some(r) => {
            // Let the daemon catch up so a following `ps` agrees.
            let _ = client.wait(&id);
            Ok(r.status.as_shell_code())
        }
        None => Ok(wait_code(&client.wait(&id)?)),
    }
}

fn replay_daemon_logs(client: &DaemonClient, id: &ContainerId) -> Result<Option<ExitReport>, CliError> {
    match client.logs(id)? {
        LogSource::Stream(stream) => pump_frames(stream),
        LogSource::Monitor(socket) => pump_frames(MonitorClient::new(socket).logs(false)?),
    }
}

fn logs(ctx: &Ctx, id: &ContainerId, follow: bool) -> CliResult {
    let client = ctx.client();
    match client.logs(id)? {
        LogSource::Stream(stream) => {
            pump_frames(stream)?;
        }
        LogSource::Monitor(socket) => match MonitorClient::new(socket).logs(follow) {
            Ok(stream) => {
                pump_frames(stream)?;
            }
            // The monitor exited between the two requests.
            Err(e) if e.is_transport() => {
                replay_daemon_logs(&client, id)?;
            }
            Err(e) => return Err(e.into()),
        },
    }
    Ok(0)
}

fn daemon_config(layout: &StateDirLayout, args: &DaemonStartArgs) -> DaemonConfig {
    let mut config = DaemonConfig::new(layout.root());
    config.mode = args.mode;
    config.poll_interval_ms = args.poll_interval_ms;
    config.handshake_timeout_ms = args.handshake_timeout_ms;
    config.id_seed = args.seed;
    config.max_log_bytes = args.max_log_bytes;
    config
}

fn daemon_start(ctx: &Ctx, args: DaemonStartArgs) -> CliResult {
    let config = daemon_config(&ctx.layout, &args);
    config.validate().map_err(|e| CliError::User(e.to_string()))?;
    if args.foreground {
        return match daemon::serve(config) {
            Ok(()) => Ok(0),
            Err(e @ (DaemonError::AlreadyRunning(_) | DaemonError::Config(_))) => Err(CliError::User(e.to_string())),
            Err(e) => Err(CliError::Transport(e.to_string())),
        };
    }

    let client = ctx.client();
    if client.ping() {
        return Err(CliError::User(format!("a daemon is already serving {}", ctx.layout.daemon_sock().display())));
    }
    std::fs::create_dir_all(ctx.layout.root())?;
    let log_path = ctx.layout.root().join("daemon.log");
    let log = OpenOptions::new().create(true).append(true).open(&log_path)?;
    let exe = std::env::current_exe()?;
    let mut cmd = Command::new(exe);
    cmd.arg("--state-dir")
        .arg(ctx.layout.root())
        .args(["daemon", "start", "--foreground", "--mode", args.mode.as_str()])
        .arg("--poll-interval-ms")
        .arg(args.poll_interval_ms.to_string())
        .arg("--handshake-timeout-ms")
        .arg(args.handshake_timeout_ms.to_string())
        .stdin(Stdio::null())
        .stdout(Stdio::from(log.try_clone()?))
        .stderr(Stdio::from(log));
    if let Some(seed) = args.seed {
        cmd.arg("--seed").arg(seed.to_string());
    }
    if let Some(max) = args.max_log_bytes {
        cmd.arg("--max-log-bytes").arg(max.to_string());
    }
    // SAFETY: setsid is async-signal-safe.
    unsafe {
        cmd.pre_exec(|| {
            nix::unistd::setsid().map_err(io::Error::from)?;
            Ok(())
        });
    }
    let mut child = cmd.spawn()?;
    let deadline = Instant::now() + Duration::from_secs(10);
    loop {
        if let Ok(st) = client.status() {
            if ctx.json {
                return print_json(&st);
            }
            println!("{}", st.pid);
            return Ok(0);
        }
        if let Some(status) = child.try_wait()? {
            return Err(CliError::User(format!(
                "daemon exited during startup ({status}); see {}",
                log_path.display()
            )));
        }
        if Instant::now() > deadline {
            return Err(CliError::Transport(format!("daemon did not come up; see {}", log_path.display())));
        }
        thread::sleep(Duration::from_millis(20));
    }
}

fn daemon_stop(ctx: &Ctx) -> CliResult {
    let client = ctx.client();
    let who = read_daemon_identity(&ctx.layout);
    client.call_ok(&hydra_core::protocol::Request::Shutdown)?;
    if let Some(identity) = who {
        wait_gone(&ctx.layout, identity, Duration::from_secs(10))?;
    }
    Ok(0)
}

fn wait_gone(layout: &StateDirLayout, identity: hydra_core::ProcessIdentity, timeout: Duration) -> Result<(), CliError> {
    let deadline = Instant::now() + timeout;
    while sandbox::is_alive(&identity) {
        if Instant::now() > deadline {
            return Err(CliError::Transport(format!(
                "daemon {} still running after shutdown request ({})",
                identity.pid,
                layout.root().display()
            )));
        }
        thread::sleep(Duration::from_millis(10));
    }
    Ok(())
}
