//! Named-tensor checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "NCDM"  version:u16  count:u32
//! count × { name_len:u16 name:utf8  rank:u8 dims:u32×rank  values:f32×∏dims }
//! crc32:u32   (over every preceding byte)
//! ```

use std::path::Path;

use thiserror::Error;

use crate::net::{param_shapes, ModelConfig, NcdModel, Parameters, PARAM_NAMES};
use crate::tensor::{Float, Tensor};

pub const MAGIC: &[u8; 4] = b"NCDM";
pub const VERSION: u16 = 1;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint CRC mismatch: stored {stored:08x}, computed {computed:08x}")]
    BadCrc { stored: u32, computed: u32 },
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { found: u16, expected: u16 },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint lacks entry {0:?}")]
    Missing(String),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: Vec<(String, Tensor)>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(CheckpointError::Truncated(self.bytes.len()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor, CheckpointError> {
        self.get(name).ok_or_else(|| CheckpointError::Missing(name.to_string()))
    }

    pub fn scalar(&self, name: &str) -> Result<Float, CheckpointError> {
        self.require(name)?.item().ok_or_else(|| CheckpointError::Malformed(format!("{name} is not a scalar")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            // A no-op cast unless built with `f64`.
            #[allow(clippy::unnecessary_cast)]
            for &v in t.data() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(if bytes.len() < 4 { CheckpointError::Truncated(bytes.len()) } else { CheckpointError::BadMagic });
        }
        if bytes.len() < 4 + 2 + 4 + 4 {
            return Err(CheckpointError::Truncated(bytes.len()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        let mut r = Reader { bytes: body, pos: 4 };
        let version = r.u16()?;
        if version != VERSION {
            return Err(CheckpointError::Version { found: version, expected: VERSION });
        }
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(CheckpointError::BadCrc { stored, computed });
        }
        let count = r.u32()?;
        let mut entries = Vec::with_capacity(count.min(1024) as usize);
        for _ in 0..count {
            let len = usize::from(r.u16()?);
            let name =
                std::str::from_utf8(r.take(len)?).map_err(|_| CheckpointError::Malformed("entry name is not UTF-8".into()))?.to_string();
            let rank = usize::from(r.u8()?);
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            let numel: usize = shape.iter().product();
            let raw = r.take(numel.checked_mul(4).ok_or_else(|| CheckpointError::Malformed(format!("{name}: size overflow")))?)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as Float).collect();
            let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Malformed(format!("{name}: {e}")))?;
            entries.push((name, t));
        }
        if r.pos != body.len() {
            return Err(CheckpointError::Malformed(format!("{} trailing bytes", body.len() - r.pos)));
        }
        Ok(Self { entries })
    }

    pub fn write(&self, path: &Path) -> crate::Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| crate::Error::io(path, e))
    }

    pub fn read(path: &Path) -> crate::Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| crate::Error::io(path, e))?;
        Ok(Self::from_bytes(&bytes)?)
    }
}

impl NcdModel {
    /// Parameters plus the architecture switches.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::default();
        for (name, t) in PARAM_NAMES.iter().zip(&self.params.tensors) {
            ck.push(*name, t.clone());
        }
        let flag = |b: bool| Tensor::scalar(if b { 1.0 } else { 0.0 });
        ck.push("config.dropout", Tensor::scalar(self.config.dropout));
        ck.push("config.decentralize", flag(self.config.decentralize));
        ck.push("config.fuse_columns", flag(self.config.fuse_columns));
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, CheckpointError> {
        let mut tensors = Vec::with_capacity(PARAM_NAMES.len());
        for (name, shape) in PARAM_NAMES.iter().zip(param_shapes()) {
            let t = ck.require(name)?;
            if t.shape() != shape.as_slice() {
                return Err(CheckpointError::Malformed(format!("{name}: shape {:?}, expected {shape:?}", t.shape())));
            }
            tensors.push(t.clone());
        }
        let config = ModelConfig {
            dropout: ck.scalar("config.dropout")?,
            decentralize: ck.scalar("config.decentralize")? != 0.0,
            fuse_columns: ck.scalar("config.fuse_columns")? != 0.0,
        };
        Ok(Self { params: Parameters { tensors }, config })
    }
}
