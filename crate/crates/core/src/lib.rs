//! Container supervision that survives the supervising daemon.
//!
//! Each container gets its own small monitor process which parents the
//! container, records its exit status in a file, and serves I/O on a
//! per-container socket. The daemon only keeps a registry, so it can crash,
//! be upgraded or restart without taking containers down with it.
//!
//! Modules:
//! - [`model`]: ids, specs, states, records.
//! - [`protocol`]: state directory layout, exit files, frames, API messages.
//! - [`sandbox`]: spawning and signalling container process groups, `/proc`.
//! - [`monitor`]: the per-container monitor and its launch shim.
//! - [`daemon`]: registry, API server, exit ingestion, reconciliation, poller.
//! - [`client`]: blocking clients for the daemon and monitor sockets.

pub mod client;
pub mod daemon;
pub mod error;
pub mod model;
pub mod monitor;
pub mod protocol;
pub mod sandbox;

pub use error::{ModelError, ProtocolError, SandboxError};
pub use model::{
    new_container_id, validate_transition, ContainerId, ContainerRecord, ContainerSpec, ContainerState,
    ExitReport, ExitStatus, Isolation, ProcessIdentity, SupervisionMode,
};

/// Milliseconds since the Unix epoch.
pub fn now_ms() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or_default()
}
