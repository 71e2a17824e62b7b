use std::io;
use std::path::PathBuf;

use thiserror::Error;

use crate::model::ContainerState;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid container id {0:?}: expected 16 lowercase hex digits")]
    InvalidId(String),
    #[error("container command is empty")]
    EmptyCommand,
    #[error("working directory {0:?} is not absolute")]
    RelativeWorkingDir(PathBuf),
    #[error("environment entry {0:?} is not KEY=VALUE")]
    BadEnv(String),
    #[error("unknown supervision mode {0:?}")]
    UnknownMode(String),
    #[error("illegal state transition {from:?} -> {to:?}")]
    IllegalTransition {
        from: ContainerState,
        to: ContainerState,
    },
    #[error("record invariant violated: {0}")]
    Invariant(&'static str),
}

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("state directory {0:?} is not an absolute path")]
    RelativeRoot(PathBuf),
    #[error("malformed exit file: {0}")]
    Parse(String),
    #[error("frame payload of {0} bytes exceeds the 1 MiB limit")]
    FrameTooLarge(usize),
    #[error("bad frame tag {0}")]
    BadTag(u8),
    #[error("stream ended inside a frame ({0} trailing bytes)")]
    Truncated(usize),
    #[error("exit_notify signal {0} collides with a container-control signal")]
    SignalCollision(i32),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Error)]
pub enum SandboxError {
    #[error("failed to exec {program:?}: {source}")]
    ExecFailure {
        program: String,
        #[source]
        source: io::Error,
    },
    #[error("namespace isolation unsupported on this host: {0}")]
    IsolationUnsupported(String),
    #[error("wait on pid {0} attempted by a process that is not its parent")]
    NotParent(i32),
    #[error("permission denied signalling process group {0}")]
    PermissionDenied(i32),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl SandboxError {
    pub fn raw_os_error(&self) -> Option<i32> {
        match self {
            SandboxError::ExecFailure { source, .. } => source.raw_os_error(),
            SandboxError::Io(e) => e.raw_os_error(),
            _ => None,
        }
    }
}

impl From<nix::errno::Errno> for SandboxError {
    fn from(e: nix::errno::Errno) -> Self {
        SandboxError::Io(io::Error::from(e))
    }
}
