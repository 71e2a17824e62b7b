//! Domain types shared by the daemon, the per-container monitor, the CLI and
//! the benchmark harness.
//!
//! Everything here is a plain value: cheap to clone, safe to send between
//! tasks, and serializable to the on-disk record format.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::ModelError;

/// Opaque container id: 64 random bits rendered as 16 lowercase hex digits.
///
/// The id names the container's record directory, exit file, log file and
/// monitor socket, so it must stay filesystem-safe.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ContainerId(String);

impl ContainerId {
    pub const LEN: usize = 16;

    pub fn parse(s: &str) -> Result<Self, ModelError> {
        let valid = s.len() == Self::LEN
            && s.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b));
        if valid {
            Ok(ContainerId(s.to_owned()))
        } else {
            Err(ModelError::InvalidId(s.to_owned()))
        }
    }

    pub fn from_u64(bits: u64) -> Self {
        ContainerId(format!("{bits:016x}"))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ContainerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for ContainerId {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ContainerId::parse(s)
    }
}

impl TryFrom<String> for ContainerId {
    type Error = ModelError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        ContainerId::parse(&s)
    }
}

impl From<ContainerId> for String {
    fn from(id: ContainerId) -> String {
        id.0
    }
}

/// Generates a container id. A seed makes the result deterministic; without
/// one the id comes from the thread-local OS-seeded generator.
pub fn new_container_id(seed: Option<u64>) -> ContainerId {
    match seed {
        Some(seed) => ContainerId::from_u64(ChaCha8Rng::seed_from_u64(seed).next_u64()),
        None => ContainerId::from_u64(rand::random()),
    }
}

/// Stream of ids for a daemon. Seeded generators reproduce the same sequence
/// across runs, which the benchmark harness relies on.
#[derive(Debug)]
pub struct IdGenerator {
    rng: ChaCha8Rng,
}

impl IdGenerator {
    pub fn new(seed: Option<u64>) -> Self {
        let rng = match seed {
            Some(seed) => ChaCha8Rng::seed_from_u64(seed),
            None => ChaCha8Rng::from_entropy(),
        };
        IdGenerator { rng }
    }

    pub fn next_id(&mut self) -> ContainerId {
        ContainerId::from_u64(self.rng.next_u64())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Isolation {
    #[default]
    None,
    /// Fresh PID, mount and UTS namespaces.
    Namespaces,
}

fn default_true() -> bool {
    true
}

fn default_grace() -> u64 {
    ContainerSpec::DEFAULT_STOP_GRACE_MS
}

/// Immutable launch description of a container.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContainerSpec {
    pub command: Vec<String>,
    #[serde(default)]
    pub env: Vec<String>,
    #[serde(default)]
    pub working_dir: Option<PathBuf>,
    #[serde(default)]
    pub isolation: Isolation,
    #[serde(default = "default_true")]
    pub restart_on_monitor_loss: bool,
    #[serde(default = "default_grace")]
    pub stop_grace_ms: u64,
}

impl ContainerSpec {
    pub const DEFAULT_STOP_GRACE_MS: u64 = 10_000;

    pub fn new<I, S>(command: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        ContainerSpec {
            command: command.into_iter().map(Into::into).collect(),
            env: Vec::new(),
            working_dir: None,
            isolation: Isolation::None,
            restart_on_monitor_loss: true,
            stop_grace_ms: Self::DEFAULT_STOP_GRACE_MS,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.command.is_empty() || self.command[0].is_empty() {
            return Err(ModelError::EmptyCommand);
        }
        if let Some(dir) = &self.working_dir {
            if !dir.is_absolute() {
                return Err(ModelError::RelativeWorkingDir(dir.clone()));
            }
        }
        if let Some(bad) = self.env.iter().find(|kv| !kv.contains('=')) {
            return Err(ModelError::BadEnv(bad.clone()));
        }
        Ok(())
    }
}

/// A pid paired with the process start time, so a recycled pid is never
/// mistaken for the process that was recorded.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ProcessIdentity {
    pub pid: i32,
    /// Start time in clock ticks since boot (field 22 of `/proc/<pid>/stat`).
    pub start_ticks: u64,
}

/// How a container terminated. Exactly one of exit code or signal.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExitStatus {
    Code(u8),
    Signal(i32),
}

impl ExitStatus {
    pub fn exit_code(&self) -> Option<u8> {
        match self {
            ExitStatus::Code(c) => Some(*c),
            ExitStatus::Signal(_) => None,
        }
    }

    pub fn term_signal(&self) -> Option<i32> {
        match self {
            ExitStatus::Code(_) => None,
            ExitStatus::Signal(s) => Some(*s),
        }
    }

    /// Shell-style status: the code itself, or 128 + signal number.
    pub fn as_shell_code(&self) -> i32 {
        match self {
            ExitStatus::Code(c) => i32::from(*c),
            ExitStatus::Signal(s) => 128 + s,
        }
    }
}

impl fmt::Display for ExitStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExitStatus::Code(c) => write!(f, "code {c}"),
            ExitStatus::Signal(s) => write!(f, "signal {s}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum ContainerState {
    Created,
    Running,
    Paused,
    Stopping,
    Exited(ExitStatus),
    Lost,
}

impl ContainerState {
    pub fn name(&self) -> &'static str {
        match self {
            ContainerState::Created => "created",
            ContainerState::Running => "running",
            ContainerState::Paused => "paused",
            ContainerState::Stopping => "stopping",
            ContainerState::Exited(_) => "exited",
            ContainerState::Lost => "lost",
        }
    }

    pub fn is_exited(&self) -> bool {
        matches!(self, ContainerState::Exited(_))
    }

    /// Running, paused or stopping: a container process is expected to exist.
    pub fn is_live(&self) -> bool {
        matches!(
            self,
            ContainerState::Running | ContainerState::Paused | ContainerState::Stopping
        )
    }
}

impl fmt::Display for ContainerState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ContainerState::Exited(status) => write!(f, "exited ({status})"),
            other => f.write_str(other.name()),
        }
    }
}

/// Whether `from -> to` is a legal state change.
///
/// A stopped (paused) process can still be killed, so `Paused -> Exited` is
/// allowed for signal deaths only. `Exited` is terminal; restarting a record
/// goes through [`ContainerRecord::reincarnate`] instead.
pub fn validate_transition(from: ContainerState, to: ContainerState) -> bool {
    use ContainerState::*;
    match (from, to) {
        (Exited(_), _) => false,
        (Paused, Exited(ExitStatus::Code(_))) => false,
        (_, Exited(_)) => true,
        (Created, Running)
        | (Running, Paused)
        | (Paused, Running)
        | (Running, Stopping)
        | (Running, Lost) => true,
        _ => false,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupervisionMode {
    /// Monitors stay daemon children and die with it (the vanilla baseline).
    Coupled,
    /// Monitors start as daemon children; when the daemon dies they are
    /// orphaned and keep running.
    Lazy,
    /// Monitors are daemonized at spawn and never belong to the daemon.
    #[default]
    Decoupled,
}

impl SupervisionMode {
    pub const ALL: [SupervisionMode; 3] = [
        SupervisionMode::Coupled,
        SupervisionMode::Lazy,
        SupervisionMode::Decoupled,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            SupervisionMode::Coupled => "coupled",
            SupervisionMode::Lazy => "lazy",
            SupervisionMode::Decoupled => "decoupled",
        }
    }

    /// Whether containers outlive the daemon process.
    pub fn survives_daemon(&self) -> bool {
        !matches!(self, SupervisionMode::Coupled)
    }
}

impl fmt::Display for SupervisionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SupervisionMode {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "coupled" => Ok(SupervisionMode::Coupled),
            "lazy" => Ok(SupervisionMode::Lazy),
            "decoupled" => Ok(SupervisionMode::Decoupled),
            other => Err(ModelError::UnknownMode(other.to_owned())),
        }
    }
}

/// Payload of an exit file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExitReport {
    pub container_id: ContainerId,
    pub status: ExitStatus,
    pub finished_at: u64,
}

impl ExitReport {
    pub fn exit_code(&self) -> Option<u8> {
        self.status.exit_code()
    }

    pub fn term_signal(&self) -> Option<i32> {
        self.status.term_signal()
    }
}

/// Persisted registry entry for one container.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContainerRecord {
    pub id: ContainerId,
    pub spec: ContainerSpec,
    pub mode: SupervisionMode,
    #[serde(flatten)]
    pub state: ContainerState,
    #[serde(default)]
    pub monitor: Option<ProcessIdentity>,
    #[serde(default)]
    pub container: Option<ProcessIdentity>,
    #[serde(default)]
    pub created_at: Option<u64>,
    #[serde(default)]
    pub started_at: Option<u64>,
    #[serde(default)]
    pub finished_at: Option<u64>,
    #[serde(default)]
    pub restart_count: u32,
    /// Set when the container vanished without an exit file; the recorded
    /// status is then a placeholder SIGKILL.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub exit_unknown: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub launch_error: Option<String>,
}

impl ContainerRecord {
    pub fn new(id: ContainerId, spec: ContainerSpec, mode: SupervisionMode, now_ms: u64) -> Self {
        ContainerRecord {
            id,
            spec,
            mode,
            state: ContainerState::Created,
            monitor: None,
            container: None,
            created_at: Some(now_ms),
            started_at: None,
            finished_at: None,
            restart_count: 0,
            exit_unknown: false,
            launch_error: None,
        }
    }

    /// Applies a checked transition.
    pub fn transition(&mut self, to: ContainerState) -> Result<(), ModelError> {
        if !validate_transition(self.state, to) {
            return Err(ModelError::IllegalTransition { from: self.state, to });
        }
        self.state = to;
        Ok(())
    }

    /// Marks the record exited. A paused container that exited normally was
    /// resumed behind our back, so it passes through `Running` first.
    pub fn mark_exited(&mut self, status: ExitStatus, finished_at: u64) -> Result<(), ModelError> {
        let to = ContainerState::Exited(status);
        if self.state == ContainerState::Paused && !validate_transition(self.state, to) {
            self.transition(ContainerState::Running)?;
        }
        self.transition(to)?;
        self.finished_at = Some(finished_at);
        Ok(())
    }

    /// Marks the record exited with no known status.
    pub fn mark_exit_unknown(&mut self, finished_at: u64) -> Result<(), ModelError> {
        self.mark_exited(ExitStatus::Signal(libc::SIGKILL), finished_at)?;
        self.exit_unknown = true;
        Ok(())
    }

    /// Starts a new incarnation of the record under the same id: back to
    /// `Created`, identities cleared. Used by start, restart and monitor-loss
    /// recovery.
    pub fn reincarnate(&mut self, count_restart: bool) {
        self.state = ContainerState::Created;
        self.monitor = None;
        self.container = None;
        self.started_at = None;
        self.finished_at = None;
        self.exit_unknown = false;
        self.launch_error = None;
        if count_restart {
            self.restart_count += 1;
        }
    }

    pub fn exit_report(&self) -> Option<ExitReport> {
        match self.state {
            ContainerState::Exited(status) => Some(ExitReport {
                container_id: self.id.clone(),
                status,
                finished_at: self.finished_at.unwrap_or_default(),
            }),
            _ => None,
        }
    }

    /// Checks the structural invariants of a record.
    pub fn check_invariants(&self) -> Result<(), ModelError> {
        if self.state == ContainerState::Running && self.container.is_none() {
            return Err(ModelError::Invariant("running record without container identity"));
        }
        if self.state.is_exited() && self.finished_at.is_none() {
            return Err(ModelError::Invariant("exited record without finished_at"));
        }
        Ok(())
    }
}
