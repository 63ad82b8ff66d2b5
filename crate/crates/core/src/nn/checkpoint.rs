//! Portable weight files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "SSHD" | version u32 | entry count u32
//! per entry: name len u16 | UTF-8 name | dtype u8 (0 = f32) | ndim u8 | dims u64 × ndim | f32 payload
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::graph::ModelGraph;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SSHD";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub value: Tensor,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub entries: Vec<Entry>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!(
                "truncated while reading {what} at byte {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.push(DTYPE_F32);
            out.push(e.value.ndim() as u8);
            for &d in e.value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in e.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4, "magic").map_err(|_| Error::Checkpoint("corrupt header: file too short".into()))? != MAGIC {
            return Err(Error::Checkpoint("corrupt header: bad magic".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("corrupt header: unsupported version {version}")));
        }
        let count = r.u32("entry count")? as usize;
        let mut entries = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name_len = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "name")?)
                .map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?
                .to_string();
            let dtype = r.u8("dtype")?;
            if dtype != DTYPE_F32 {
                return Err(Error::Checkpoint(format!("dtype mismatch for `{name}`: code {dtype}, expected 0 (f32)")));
            }
            let ndim = r.u8("ndim")? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64("dims")? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| Error::Checkpoint(format!("absurd shape {shape:?} for `{name}`")))?;
            let payload = r.take(n, "payload")?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            entries.push(Entry {
                name,
                value: Tensor::new(shape, data)?,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after last entry",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint { entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Payload bytes only (excludes header and manifest).
    pub fn payload_len(&self) -> usize {
        self.entries.iter().map(|e| e.value.len() * 4).sum()
    }
}

/// Every parameter (weights and running statistics), in graph order.
pub fn save_checkpoint(model: &ModelGraph) -> Checkpoint {
    Checkpoint {
        entries: model
            .params()
            .into_iter()
            .map(|p| Entry {
                name: p.name.clone(),
                value: p.value.clone(),
            })
            .collect(),
    }
}

/// Restores weights into a copy of `template`, which supplies the structure.
/// Names, order and shapes must match exactly.
pub fn load_checkpoint(template: &ModelGraph, ckpt: &Checkpoint) -> Result<ModelGraph> {
    let mut model = template.clone();
    let mut params = model.params_mut();
    if params.len() != ckpt.entries.len() {
        return Err(Error::Checkpoint(format!(
            "graph has {} arrays, checkpoint has {}",
            params.len(),
            ckpt.entries.len()
        )));
    }
    for (p, e) in params.iter_mut().zip(&ckpt.entries) {
        if p.name != e.name {
            return Err(Error::Checkpoint(format!("expected `{}`, found `{}`", p.name, e.name)));
        }
        if p.value.shape() != e.value.shape() {
            return Err(Error::Checkpoint(format!(
                "`{}` has shape {:?}, checkpoint has {:?}",
                p.name,
                p.value.shape(),
                e.value.shape()
            )));
        }
        p.value = e.value.clone();
    }
    Ok(model)
}
