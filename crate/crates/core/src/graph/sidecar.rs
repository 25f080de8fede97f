//! Binary tensor sidecar.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    b"LFTS"
//! version  u32 (= 1)
//! count    u32
//! count x entry:
//!     key_len u32, key utf-8   ("input", "output", or a decimal node id)
//!     slot    u32
//!     dtype   u8               (DTypeLabel::code)
//!     rank    u32, dims rank x u64
//!     offset  u64              (from the start of the data section)
//!     length  u64              (bytes)
//! data section: row-major payloads at the storage width of each dtype
//! ```

use std::path::Path;

use crate::dtype::DTypeLabel;
use crate::tensor::{TensorSpec, ValueTensor};

use super::NodeId;

pub const MAGIC: &[u8; 4] = b"LFTS";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum SidecarKey {
    Weight { node: NodeId, slot: usize },
    Input(usize),
    Output(usize),
}

impl SidecarKey {
    fn parts(&self) -> (String, u32) {
        match self {
            SidecarKey::Weight { node, slot } => (node.0.to_string(), *slot as u32),
            SidecarKey::Input(i) => ("input".into(), *i as u32),
            SidecarKey::Output(i) => ("output".into(), *i as u32),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SidecarError {
    #[error("not a tensor sidecar (bad magic)")]
    BadMagic,
    #[error("unsupported sidecar version {0}")]
    Version(u32),
    #[error("sidecar truncated")]
    Truncated,
    #[error("sidecar entry {0}: {1}")]
    Entry(usize, String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn encode(entries: &[(SidecarKey, ValueTensor)]) -> Vec<u8> {
    let mut header = Vec::new();
    let mut data = Vec::new();
    header.extend_from_slice(MAGIC);
    header.extend_from_slice(&VERSION.to_le_bytes());
    header.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (key, t) in entries {
        let (name, slot) = key.parts();
        header.extend_from_slice(&(name.len() as u32).to_le_bytes());
        header.extend_from_slice(name.as_bytes());
        header.extend_from_slice(&slot.to_le_bytes());
        header.push(t.spec.dtype.code());
        header.extend_from_slice(&(t.spec.rank() as u32).to_le_bytes());
        for d in &t.spec.shape {
            header.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        let offset = data.len();
        let storage = t.spec.storage();
        for v in &t.data {
            storage.write_le(*v, &mut data);
        }
        header.extend_from_slice(&(offset as u64).to_le_bytes());
        header.extend_from_slice(&((data.len() - offset) as u64).to_le_bytes());
    }
    header.extend_from_slice(&data);
    header
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], SidecarError> {
        let end = self.pos.checked_add(n).ok_or(SidecarError::Truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or(SidecarError::Truncated)?;
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, SidecarError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, SidecarError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, SidecarError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(SidecarKey, ValueTensor)>, SidecarError> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(SidecarError::BadMagic);
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(SidecarError::Version(version));
    }
    let count = c.u32()? as usize;
    let mut raw = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|e| SidecarError::Entry(i, e.to_string()))?
            .to_string();
        let slot = c.u32()? as usize;
        let code = c.u8()?;
        let dtype = DTypeLabel::from_code(code)
            .ok_or_else(|| SidecarError::Entry(i, format!("unknown dtype code {code}")))?;
        let rank = c.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(64));
        for _ in 0..rank {
            shape.push(c.u64()? as usize);
        }
        let offset = c.u64()? as usize;
        let length = c.u64()? as usize;
        let key = match name.as_str() {
            "input" => SidecarKey::Input(slot),
            "output" => SidecarKey::Output(slot),
            id => SidecarKey::Weight {
                node: NodeId(
                    id.parse()
                        .map_err(|_| SidecarError::Entry(i, format!("bad key `{id}`")))?,
                ),
                slot,
            },
        };
        raw.push((key, TensorSpec::new(dtype, shape), offset, length));
    }
    let data = &bytes[c.pos..];
    raw.into_iter()
        .enumerate()
        .map(|(i, (key, spec, offset, length))| {
            let width = spec.storage().byte_width();
            if spec.numel().checked_mul(width) != Some(length) {
                return Err(SidecarError::Entry(i, "length does not match shape".into()));
            }
            let payload = offset
                .checked_add(length)
                .and_then(|end| data.get(offset..end))
                .ok_or(SidecarError::Truncated)?;
            let storage = spec.storage();
            let values = payload
                .chunks_exact(width)
                .map(|b| storage.read_le(b))
                .collect();
            Ok((key, ValueTensor::new(spec, values)))
        })
        .collect()
}

pub fn write_file(path: &Path, entries: &[(SidecarKey, ValueTensor)]) -> Result<(), SidecarError> {
    std::fs::write(path, encode(entries))?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<Vec<(SidecarKey, ValueTensor)>, SidecarError> {
    decode(&std::fs::read(path)?)
}
