//! Loopback split-inference transport with per-party timing.
//!
//! The server owns the bodies and answers each FEATURES frame with one
//! LOGITS_SET holding every body's output plus its own compute time. The
//! client times its own compute and attributes the rest of the wall time to
//! communication.

mod frame;

use std::io::{BufReader, BufWriter};
use std::net::{Shutdown, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use frame::{read_frame, write_frame, ErrorCode, Frame, MsgType, ReadError, MAGIC, MAX_FRAME_BYTES, VERSION};

use crate::defense::{selector_combine, NoiseSpec, SelectorKey};
use crate::error::{Error, Result};
use crate::nn::ModelGraph;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BodyMode {
    #[default]
    Sequential,
    Parallel,
}

/// Seconds spent per party for one request.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LatencyBreakdown {
    pub client_s: f64,
    pub server_s: f64,
    pub comm_s: f64,
    pub total_s: f64,
}

impl LatencyBreakdown {
    /// `|total − (client + server + comm)| / total`.
    pub fn additivity_error(&self) -> f64 {
        let parts = self.client_s + self.server_s + self.comm_s;
        if self.total_s == 0.0 {
            return parts.abs();
        }
        (self.total_s - parts).abs() / self.total_s
    }
}

/// Handle to a running server thread.
#[derive(Debug)]
pub struct ServerHandle {
    addr: std::net::SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn addr(&self) -> std::net::SocketAddr {
        self.addr
    }

    pub fn endpoint(&self) -> String {
        self.addr.to_string()
    }

    pub fn shutdown(mut self) {
        self.stop_now();
    }

    fn stop_now(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Unblock accept().
        let _ = TcpStream::connect(self.addr);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if self.thread.is_some() {
            self.stop_now();
        }
    }
}

fn run_bodies(bodies: &[ModelGraph], z: &Tensor, mode: BodyMode) -> Result<Vec<Tensor>> {
    match mode {
        BodyMode::Sequential => bodies.iter().map(|b| b.forward(z)).collect(),
        BodyMode::Parallel => bodies.par_iter().map(|b| b.forward(z)).collect(),
    }
}

fn handle_connection(stream: TcpStream, bodies: &[ModelGraph], mode: BodyMode) -> Result<()> {
    stream.set_nodelay(true)?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    loop {
        let reply = match read_frame(&mut reader) {
            Err(ReadError::Closed) => return Ok(()),
            Err(ReadError::Io(e)) => return Err(e.into()),
            Err(ReadError::Rejected { code, skipped }) => {
                write_frame(&mut writer, &Frame::error(code))?;
                if !skipped {
                    return Ok(());
                }
                continue;
            }
            Ok(f) if f.msg_type != MsgType::Features || f.tensors.len() != 1 => Frame::error(ErrorCode::Unexpected),
            Ok(f) => {
                let t = Instant::now();
                match run_bodies(bodies, &f.tensors[0], mode) {
                    Ok(outs) => Frame::logits_set(outs, t.elapsed().as_secs_f64()),
                    Err(e) => {
                        log::warn!("body evaluation failed: {e}");
                        Frame::error(ErrorCode::Compute)
                    }
                }
            }
        };
        write_frame(&mut writer, &reply)?;
    }
}

/// Binds `endpoint` and serves connections one at a time on a new thread.
pub fn serve(bodies: Vec<ModelGraph>, endpoint: impl ToSocketAddrs, mode: BodyMode) -> Result<ServerHandle> {
    if bodies.is_empty() {
        return Err(Error::InvalidArgument("server needs at least one body".into()));
    }
    let listener = TcpListener::bind(endpoint)?;
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let flag = Arc::clone(&stop);
    let thread = thread::Builder::new().name("splitshield-server".into()).spawn(move || {
        for conn in listener.incoming() {
            if flag.load(Ordering::SeqCst) {
                break;
            }
            match conn {
                Ok(s) => {
                    if let Err(e) = handle_connection(s, &bodies, mode) {
                        log::debug!("connection ended: {e}");
                    }
                }
                Err(e) => log::warn!("accept failed: {e}"),
            }
        }
    })?;
    Ok(ServerHandle {
        addr,
        stop,
        thread: Some(thread),
    })
}

/// A synchronous request/response connection to a server.
#[derive(Debug)]
pub struct Connection {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(60);

impl Connection {
    pub fn connect(endpoint: impl ToSocketAddrs, timeout: Duration) -> Result<Self> {
        let stream = TcpStream::connect(endpoint)?;
        stream.set_nodelay(true)?;
        stream.set_read_timeout(Some(timeout))?;
        stream.set_write_timeout(Some(timeout))?;
        Ok(Connection {
            reader: BufReader::new(stream.try_clone()?),
            writer: BufWriter::new(stream),
        })
    }

    pub fn send(&mut self, frame: &Frame) -> Result<()> {
        write_frame(&mut self.writer, frame)
    }

    /// Sends raw bytes (for protocol tests).
    pub fn send_raw(&mut self, bytes: &[u8]) -> Result<()> {
        use std::io::Write;
        self.writer.write_all(bytes)?;
        self.writer.flush()?;
        Ok(())
    }

    pub fn receive(&mut self) -> Result<Frame> {
        read_frame(&mut self.reader).map_err(|e| match e {
            ReadError::Closed => Error::Protocol("server closed the connection".into()),
            ReadError::Io(e) => Error::Io(e),
            ReadError::Rejected { code, .. } => Error::Protocol(format!("undecodable reply: {code:?}")),
        })
    }

    /// Sends features and returns every body output plus the server time.
    pub fn request(&mut self, z: Tensor) -> Result<(Vec<Tensor>, f64)> {
        self.send(&Frame::features(z))?;
        let reply = self.receive()?;
        match reply.msg_type {
            MsgType::LogitsSet => Ok((reply.tensors, reply.server_time.unwrap_or(0.0))),
            MsgType::Error => Err(Error::Protocol(format!("server error {:?}", reply.error_code()))),
            t => Err(Error::Protocol(format!("unexpected reply {t:?}"))),
        }
    }

    pub fn close(self) {
        let _ = self.writer.get_ref().shutdown(Shutdown::Both);
    }
}

/// Runs the client half of split inference against a remote server.
pub fn client_infer(
    head: &ModelGraph,
    tail: &ModelGraph,
    key: &SelectorKey,
    noise: &NoiseSpec,
    conn: &mut Connection,
    x: &Tensor,
) -> Result<(Tensor, LatencyBreakdown)> {
    let start = Instant::now();
    let z = noise.apply(&head.forward(x)?)?;
    let pre = start.elapsed().as_secs_f64();
    let (outs, server_s) = conn.request(z)?;
    let t = Instant::now();
    let logits = tail.forward(&selector_combine(&outs, key)?)?;
    let post = t.elapsed().as_secs_f64();
    let total_s = start.elapsed().as_secs_f64();
    let client_s = pre + post;
    Ok((
        logits,
        LatencyBreakdown {
            client_s,
            server_s,
            comm_s: total_s - client_s - server_s,
            total_s,
        },
    ))
}
