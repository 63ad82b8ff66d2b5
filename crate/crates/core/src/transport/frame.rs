//! Wire frames (integers little-endian):
//!
//! ```text
//! "SSCI" | version u8 | msg_type u8 | tensor_count u32
//! per tensor: ndim u8 | dims u32 × ndim | f32 payload
//! LOGITS_SET and ACK only: server compute seconds f64
//! ```

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SSCI";
pub const VERSION: u8 = 1;
pub const MAX_FRAME_BYTES: usize = 256 * 1024 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum MsgType {
    Features = 0,
    LogitsSet = 1,
    Ack = 2,
    Error = 3,
}

impl MsgType {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(MsgType::Features),
            1 => Some(MsgType::LogitsSet),
            2 => Some(MsgType::Ack),
            3 => Some(MsgType::Error),
            _ => None,
        }
    }

    fn timed(self) -> bool {
        matches!(self, MsgType::LogitsSet | MsgType::Ack)
    }
}

/// Codes carried by an ERROR frame as a single `[1]` tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum ErrorCode {
    BadMagic = 1,
    BadVersion = 2,
    BadMsgType = 3,
    Oversize = 4,
    Malformed = 5,
    Compute = 6,
    Unexpected = 7,
}

impl ErrorCode {
    pub fn from_f32(v: f32) -> Option<Self> {
        Some(match v as u8 {
            1 => ErrorCode::BadMagic,
            2 => ErrorCode::BadVersion,
            3 => ErrorCode::BadMsgType,
            4 => ErrorCode::Oversize,
            5 => ErrorCode::Malformed,
            6 => ErrorCode::Compute,
            7 => ErrorCode::Unexpected,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub version: u8,
    pub msg_type: MsgType,
    pub tensors: Vec<Tensor>,
    /// Present exactly for LOGITS_SET and ACK.
    pub server_time: Option<f64>,
}

impl Frame {
    pub fn new(msg_type: MsgType, tensors: Vec<Tensor>) -> Self {
        Frame {
            version: VERSION,
            msg_type,
            tensors,
            server_time: msg_type.timed().then_some(0.0),
        }
    }

    pub fn features(z: Tensor) -> Self {
        Self::new(MsgType::Features, vec![z])
    }

    pub fn logits_set(outputs: Vec<Tensor>, server_time: f64) -> Self {
        Frame {
            server_time: Some(server_time),
            ..Self::new(MsgType::LogitsSet, outputs)
        }
    }

    pub fn error(code: ErrorCode) -> Self {
        Self::new(MsgType::Error, vec![Tensor::full(&[1], code as u8 as f32)])
    }

    pub fn error_code(&self) -> Option<ErrorCode> {
        if self.msg_type != MsgType::Error {
            return None;
        }
        self.tensors.first().and_then(|t| t.data().first()).and_then(|&v| ErrorCode::from_f32(v))
    }

    pub fn encoded_len(&self) -> usize {
        10 + self
            .tensors
            .iter()
            .map(|t| 1 + 4 * t.ndim() + 4 * t.len())
            .sum::<usize>()
            + if self.msg_type.timed() { 8 } else { 0 }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let len = self.encoded_len();
        if len > MAX_FRAME_BYTES {
            return Err(Error::Protocol(format!("frame of {len} bytes exceeds the {MAX_FRAME_BYTES}-byte limit")));
        }
        let mut out = Vec::with_capacity(len);
        out.extend_from_slice(MAGIC);
        out.push(self.version);
        out.push(self.msg_type as u8);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            if t.ndim() > u8::MAX as usize || t.shape().iter().any(|&d| d > u32::MAX as usize) {
                return Err(Error::Protocol(format!("tensor shape {:?} not representable", t.shape())));
            }
            out.push(t.ndim() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        if self.msg_type.timed() {
            out.extend_from_slice(&self.server_time.unwrap_or(0.0).to_le_bytes());
        }
        Ok(out)
    }

    /// Decodes exactly one frame occupying all of `bytes`.
    pub fn decode(bytes: &[u8]) -> Result<Frame> {
        let mut cursor = bytes;
        let frame = read_frame(&mut cursor).map_err(|e| match e {
            ReadError::Closed => Error::Protocol("empty frame".into()),
            ReadError::Io(e) => Error::Protocol(format!("truncated frame: {e}")),
            ReadError::Rejected { code, skipped } => Error::Protocol(format!("{code:?} ({})", if skipped { "skipped" } else { "unrecoverable" })),
        })?;
        if !cursor.is_empty() {
            return Err(Error::Protocol(format!("{} trailing bytes after frame", cursor.len())));
        }
        Ok(frame)
    }
}

#[derive(Debug)]
pub enum ReadError {
    /// Clean end of stream before a frame started.
    Closed,
    Io(std::io::Error),
    /// Frame is invalid. `skipped` means its bytes were consumed and the
    /// stream is positioned at the next frame.
    Rejected { code: ErrorCode, skipped: bool },
}

impl From<std::io::Error> for ReadError {
    fn from(e: std::io::Error) -> Self {
        ReadError::Io(e)
    }
}

fn read_array<const N: usize>(r: &mut impl Read) -> std::result::Result<[u8; N], ReadError> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

/// Reads one frame. A bad magic, version or message type is still parsed
/// structurally so the stream stays in sync.
pub fn read_frame(r: &mut impl Read) -> std::result::Result<Frame, ReadError> {
    let mut head = [0u8; 10];
    let mut got = 0;
    while got < head.len() {
        match r.read(&mut head[got..]) {
            Ok(0) if got == 0 => return Err(ReadError::Closed),
            Ok(0) => return Err(ReadError::Io(std::io::ErrorKind::UnexpectedEof.into())),
            Ok(n) => got += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let mut problem = None;
    if &head[..4] != MAGIC {
        problem = Some(ErrorCode::BadMagic);
    } else if head[4] != VERSION {
        problem = Some(ErrorCode::BadVersion);
    }
    let msg_type = MsgType::from_u8(head[5]);
    if msg_type.is_none() && problem.is_none() {
        problem = Some(ErrorCode::BadMsgType);
    }
    let count = u32::from_le_bytes(head[6..10].try_into().expect("4 bytes")) as usize;
    let mut total = 10usize;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let [ndim] = read_array::<1>(r)?;
        let mut shape = Vec::with_capacity(ndim as usize);
        for _ in 0..ndim {
            shape.push(u32::from_le_bytes(read_array::<4>(r)?) as usize);
        }
        let bytes = shape
            .iter()
            .try_fold(4usize, |a, &d| a.checked_mul(d))
            .filter(|&b| total + 1 + 4 * shape.len() + b <= MAX_FRAME_BYTES)
            .ok_or(ReadError::Rejected {
                code: ErrorCode::Oversize,
                skipped: false,
            })?;
        total += 1 + 4 * shape.len() + bytes;
        let mut payload = vec![0u8; bytes];
        r.read_exact(&mut payload)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.push(Tensor::new(shape, data).map_err(|_| ReadError::Rejected {
            code: ErrorCode::Malformed,
            skipped: true,
        })?);
    }
    let server_time = match msg_type {
        Some(t) if t.timed() => Some(f64::from_le_bytes(read_array::<8>(r)?)),
        _ => None,
    };
    if let Some(code) = problem {
        return Err(ReadError::Rejected { code, skipped: true });
    }
    Ok(Frame {
        version: head[4],
        msg_type: msg_type.expect("checked"),
        tensors,
        server_time,
    })
}

pub fn write_frame(w: &mut impl Write, frame: &Frame) -> Result<()> {
    w.write_all(&frame.encode()?)?;
    w.flush()?;
    Ok(())
}
