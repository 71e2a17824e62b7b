//! Blocking clients for the daemon socket and for per-container monitor
//! sockets. Used by the CLI, the benchmark harness and by monitors talking
//! back to the daemon.

use std::io::{self, BufRead, BufReader, Write};
use std::os::unix::net::UnixStream;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::de::DeserializeOwned;
use thiserror::Error;

use crate::error::ProtocolError;
use crate::model::{ContainerId, ContainerSpec};
use crate::protocol::{
    read_frame, write_frame, Frame, MonitorRequest, PsReply, Request, Response, RunReply, SocketReply,
    StatusReply, StreamTag, WaitReply,
};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("cannot connect to {path}: {source}")]
    Connect {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{code}: {message}")]
    Remote { code: String, message: String },
    #[error("malformed reply: {0}")]
    BadReply(String),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl ClientError {
    /// The remote error code, if the peer answered with `ok: false`.
    pub fn code(&self) -> Option<&str> {
        match self {
            ClientError::Remote { code, .. } => Some(code),
            _ => None,
        }
    }

    /// Whether this is a transport failure rather than a refused request.
    pub fn is_transport(&self) -> bool {
        !matches!(self, ClientError::Remote { .. })
    }
}

fn connect(path: &Path) -> Result<UnixStream, ClientError> {
    UnixStream::connect(path).map_err(|source| ClientError::Connect { path: path.to_owned(), source })
}

/// Sends one JSON line and reads one JSON line back, keeping the buffered
/// reader so any frames that follow can be read from it.
fn exchange<T: serde::Serialize>(
    path: &Path,
    request: &T,
    timeout: Option<Duration>,
) -> Result<(Response, BufReader<UnixStream>, UnixStream), ClientError> {
    let mut stream = connect(path)?;
    stream.set_read_timeout(timeout)?;
    let mut line = serde_json::to_string(request).map_err(|e| ClientError::BadReply(e.to_string()))?;
    line.push('\n');
    stream.write_all(line.as_bytes())?;
    let writer = stream.try_clone()?;
    let mut reader = BufReader::new(stream);
    let mut reply = String::new();
    if reader.read_line(&mut reply)? == 0 {
        return Err(ClientError::BadReply("connection closed before reply".into()));
    }
    let response: Response = serde_json::from_str(&reply).map_err(|e| ClientError::BadReply(e.to_string()))?;
    Ok((response, reader, writer))
}

fn into_result(response: Response) -> Result<Response, ClientError> {
    if response.ok {
        Ok(response)
    } else {
        Err(ClientError::Remote {
            code: response.error.unwrap_or_else(|| "unknown".into()),
            message: response.message.unwrap_or_default(),
        })
    }
}

fn payload<T: DeserializeOwned>(response: &Response) -> Result<T, ClientError> {
    response.payload().map_err(|e| ClientError::BadReply(e.to_string()))
}

#[derive(Clone, Debug)]
pub struct DaemonClient {
    socket: PathBuf,
    timeout: Option<Duration>,
}

impl DaemonClient {
    pub fn new(socket: impl Into<PathBuf>) -> Self {
        DaemonClient { socket: socket.into(), timeout: None }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = Some(timeout);
        self
    }

    pub fn socket(&self) -> &Path {
        &self.socket
    }

    /// Raw round trip; `ok: false` replies are returned, not turned into errors.
    pub fn request(&self, request: &Request) -> Result<Response, ClientError> {
        exchange(&self.socket, request, self.timeout).map(|(r, _, _)| r)
    }

    pub fn call<T: DeserializeOwned>(&self, request: &Request) -> Result<T, ClientError> {
        let response = into_result(self.request(request)?)?;
        payload(&response)
    }

    pub fn call_ok(&self, request: &Request) -> Result<(), ClientError> {
        into_result(self.request(request)?).map(|_| ())
    }

    pub fn ping(&self) -> bool {
        self.status().is_ok()
    }

    pub fn status(&self) -> Result<StatusReply, ClientError> {
        self.call(&Request::Status)
    }

    pub fn run(&self, spec: ContainerSpec) -> Result<RunReply, ClientError> {
        self.call(&Request::Run { spec })
    }

    pub fn ps(&self) -> Result<PsReply, ClientError> {
        self.call(&Request::Ps)
    }

    pub fn wait(&self, id: &ContainerId) -> Result<WaitReply, ClientError> {
        self.call(&Request::Wait { id: id.clone() })
    }

    pub fn kill(&self, id: &ContainerId) -> Result<(), ClientError> {
        self.call_ok(&Request::Kill { id: id.clone() })
    }

    pub fn stop(&self, id: &ContainerId, grace_ms: Option<u64>) -> Result<(), ClientError> {
        self.call_ok(&Request::Stop { id: id.clone(), grace_ms })
    }

    pub fn pause(&self, id: &ContainerId) -> Result<(), ClientError> {
        self.call_ok(&Request::Pause { id: id.clone() })
    }

    pub fn unpause(&self, id: &ContainerId) -> Result<(), ClientError> {
        self.call_ok(&Request::Unpause { id: id.clone() })
    }

    pub fn restart(&self, id: &ContainerId) -> Result<RunReply, ClientError> {
        self.call(&Request::Restart { id: id.clone() })
    }

    pub fn start(&self, id: &ContainerId) -> Result<RunReply, ClientError> {
        self.call(&Request::Start { id: id.clone() })
    }

    pub fn rm(&self, id: &ContainerId) -> Result<(), ClientError> {
        self.call_ok(&Request::Rm { id: id.clone() })
    }

    /// Monitor socket for attach.
    pub fn attach_socket(&self, id: &ContainerId) -> Result<PathBuf, ClientError> {
        self.call::<SocketReply>(&Request::Attach { id: id.clone() }).map(|r| r.socket)
    }

    /// Monitor socket for exec.
    pub fn exec_socket(&self, id: &ContainerId) -> Result<PathBuf, ClientError> {
        self.call::<SocketReply>(&Request::Exec { id: id.clone() }).map(|r| r.socket)
    }

    /// Logs: either the monitor socket to ask (container still supervised),
    /// or the frames streamed directly from the log file.
    pub fn logs(&self, id: &ContainerId) -> Result<LogSource, ClientError> {
        let (response, reader, writer) = exchange(&self.socket, &Request::Logs { id: id.clone() }, self.timeout)?;
        let response = into_result(response)?;
        match response.body.get("socket").and_then(|v| v.as_str()) {
            Some(socket) => Ok(LogSource::Monitor(PathBuf::from(socket))),
            None => Ok(LogSource::Stream(FrameStream { reader, writer })),
        }
    }
}

pub enum LogSource {
    Monitor(PathBuf),
    Stream(FrameStream),
}

/// A connection that has switched to frames.
#[derive(Debug)]
pub struct FrameStream {
    reader: BufReader<UnixStream>,
    writer: UnixStream,
}

impl FrameStream {
    /// Next frame; `None` when the peer closed the stream.
    pub fn next_frame(&mut self) -> Result<Option<Frame>, ClientError> {
        Ok(read_frame(&mut self.reader)?)
    }

    pub fn send_stdin(&mut self, bytes: &[u8]) -> Result<(), ClientError> {
        // An empty stdin frame means EOF, so data frames are never empty.
        if bytes.is_empty() {
            return Ok(());
        }
        for chunk in bytes.chunks(64 * 1024) {
            write_frame(&mut self.writer, StreamTag::Stdin, chunk)?;
        }
        Ok(())
    }

    pub fn close_stdin(&mut self) -> Result<(), ClientError> {
        write_frame(&mut self.writer, StreamTag::Stdin, &[])?;
        Ok(())
    }

    /// A second handle on the write side, for pumping stdin from another
    /// thread.
    pub fn stdin_writer(&self) -> io::Result<StdinWriter> {
        Ok(StdinWriter { stream: self.writer.try_clone()? })
    }

    /// Drains the stream, returning every frame up to and including the exit
    /// notice (or until the peer closes).
    pub fn collect(mut self) -> Result<Vec<Frame>, ClientError> {
        let mut frames = Vec::new();
        while let Some(frame) = self.next_frame()? {
            let done = frame.tag == StreamTag::ExitNotice;
            frames.push(frame);
            if done {
                break;
            }
        }
        Ok(frames)
    }
}

#[derive(Debug)]
pub struct StdinWriter {
    stream: UnixStream,
}

impl StdinWriter {
    pub fn send(&mut self, bytes: &[u8]) -> Result<(), ClientError> {
        for chunk in bytes.chunks(64 * 1024).filter(|c| !c.is_empty()) {
            write_frame(&mut self.stream, StreamTag::Stdin, chunk)?;
        }
        Ok(())
    }

    pub fn close(&mut self) -> Result<(), ClientError> {
        write_frame(&mut self.stream, StreamTag::Stdin, &[])?;
        Ok(())
    }
}

/// Client for a container's monitor socket.
#[derive(Clone, Debug)]
pub struct MonitorClient {
    socket: PathBuf,
}

impl MonitorClient {
    pub fn new(socket: impl Into<PathBuf>) -> Self {
        MonitorClient { socket: socket.into() }
    }

    fn open(&self, request: &MonitorRequest) -> Result<FrameStream, ClientError> {
        let (response, reader, writer) = exchange(&self.socket, request, None)?;
        into_result(response)?;
        Ok(FrameStream { reader, writer })
    }

    pub fn attach(&self, stdin: bool, logs: bool) -> Result<FrameStream, ClientError> {
        self.open(&MonitorRequest::Attach { stdin, logs })
    }

    pub fn exec(&self, argv: Vec<String>, env: Vec<String>) -> Result<FrameStream, ClientError> {
        self.open(&MonitorRequest::Exec { argv, env })
    }

    pub fn logs(&self, follow: bool) -> Result<FrameStream, ClientError> {
        self.open(&MonitorRequest::Logs { follow })
    }

    pub fn wait(&self) -> Result<WaitReply, ClientError> {
        let (response, _, _) = exchange(&self.socket, &MonitorRequest::Wait, None)?;
        payload(&into_result(response)?)
    }
}
