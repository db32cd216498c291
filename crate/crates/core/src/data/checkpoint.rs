//! `PUTFv1` checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "PUTF" "v1"                      6-byte magic + version
//! u32 len, len bytes               model config as key=value lines (UTF-8)
//! u32 count                        number of tensors
//! count × {
//!     u16 len, len bytes           tensor name (UTF-8)
//!     u32 rank
//!     rank × u64                   extents
//!     product(extents) × f32       values
//!     u64                          footer: element count, must equal the product
//! }
//! ```
//!
//! Values are always stored as `f32`; saving `f64` parameters truncates.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 4] = b"PUTF";
pub const VERSION: &[u8; 2] = b"v1";

/// Decoded file contents before model validation.
#[derive(Clone, Debug, PartialEq)]
pub struct RawCheckpoint {
    pub config: String,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(what));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u16(&mut self, what: &'static str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

impl RawCheckpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(VERSION);
        let cfg_len = u32::try_from(self.config.len())
            .map_err(|_| Error::Checkpoint("config block too large".into()))?;
        out.extend_from_slice(&cfg_len.to_le_bytes());
        out.extend_from_slice(self.config.as_bytes());
        let count = u32::try_from(self.tensors.len())
            .map_err(|_| Error::Checkpoint("too many tensors".into()))?;
        out.extend_from_slice(&count.to_le_bytes());
        for (name, t) in &self.tensors {
            let name_len = u16::try_from(name.len())
                .map_err(|_| Error::Checkpoint(format!("tensor name too long: {name}")))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend_from_slice(&(t.numel() as u64).to_le_bytes());
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        let magic = r.take(4, "magic").map_err(|_| Error::BadMagic)?;
        if magic != MAGIC {
            return Err(Error::BadMagic);
        }
        let version = r.take(2, "version")?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion(
                String::from_utf8_lossy(version).into_owned(),
            ));
        }
        let cfg_len = r.u32("config length")? as usize;
        let config = std::str::from_utf8(r.take(cfg_len, "config block")?)
            .map_err(|_| Error::Checkpoint("config block is not UTF-8".into()))?
            .to_string();
        let count = r.u32("tensor count")?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name_len = r.u16("tensor name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32("tensor rank")? as usize;
            if rank.saturating_mul(8) > r.remaining() {
                return Err(Error::Truncated("tensor extents"));
            }
            let mut shape = Vec::with_capacity(rank);
            let mut declared: u64 = 1;
            for _ in 0..rank {
                let e = r.u64("tensor extents")?;
                declared = declared.checked_mul(e).ok_or_else(|| {
                    Error::Checkpoint(format!("extent product overflows for {name}"))
                })?;
                shape.push(e);
            }
            // The footer sits right after the values; locate it via the extents.
            let value_bytes = declared
                .checked_mul(4)
                .filter(|&b| b <= r.remaining() as u64)
                .ok_or(Error::Truncated("tensor values"))? as usize;
            let raw = r.take(value_bytes, "tensor values")?;
            let footer = r.u64("tensor footer")?;
            if footer != declared {
                return Err(Error::Integrity {
                    name,
                    declared,
                    footer,
                });
            }
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let shape = shape.into_iter().map(|e| e as usize).collect();
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.remaining() != 0 {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after last tensor",
                r.remaining()
            )));
        }
        Ok(RawCheckpoint { config, tensors })
    }
}

pub fn encode_checkpoint<T: Real>(cfg: &ModelConfig, params: &ModelParams<T>) -> Result<Vec<u8>> {
    RawCheckpoint {
        config: cfg.to_kv(),
        tensors: params
            .iter()
            .map(|(n, t)| (n.to_string(), t.cast::<f32>()))
            .collect(),
    }
    .encode()
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ModelConfig, ModelParams<f32>)> {
    let raw = RawCheckpoint::decode(bytes)?;
    let cfg = ModelConfig::from_kv(&raw.config)?;
    let mut map = BTreeMap::new();
    for (name, t) in raw.tensors {
        if map.insert(name.clone(), t).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
        }
    }
    let params = ModelParams::from_tensors(&cfg, map)?;
    Ok((cfg, params))
}

pub fn save_checkpoint<T: Real>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(cfg, params)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ModelParams<f32>, ModelConfig)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (cfg, params) = decode_checkpoint(&bytes)?;
    Ok((params, cfg))
}
