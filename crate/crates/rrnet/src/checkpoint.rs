//! Binary checkpoint format, little-endian throughout:
//!
//! ```text
//! magic    8 bytes  "RRNETCK1"
//! version  u32
//! config   u32 length + UTF-8 key=value text
//! count    u32
//! entry*   u32 name length, name, u32 rank, u64 dims[rank],
//!          f32 values[product(dims)], u32 CRC-32 of the entry bytes before it
//! ```

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rrnet_core::{NetworkConfig, ParamSet, Tensor};

pub const MAGIC: &[u8; 8] = b"RRNETCK1";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("not a checkpoint: bad magic")]
    BadMagic,
    #[error("checkpoint version {found} is not supported (this build reads version {VERSION}); re-save it with a matching rrnet build or retrain")]
    Version { found: u32 },
    #[error("truncated checkpoint: needed {needed} bytes at offset {offset}")]
    Truncated { offset: usize, needed: usize },
    #[error("duplicate parameter `{0}`")]
    Duplicate(String),
    #[error("checksum mismatch in parameter `{0}`")]
    Checksum(String),
    #[error("corrupt checkpoint at offset {offset}: {msg}")]
    Corrupt { offset: usize, msg: String },
    #[error("config snapshot: {0}")]
    Config(rrnet_core::Error),
}

pub fn encode(params: &ParamSet<f32>, cfg: &NetworkConfig) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let config = cfg.to_kv();
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        let start = out.len();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let crc = crc32fast::hash(&out[start..]);
        out.extend_from_slice(&crc.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(CheckpointError::Truncated {
                offset: self.pos,
                needed: n,
            });
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn text(&mut self, what: &str) -> Result<&'a str, CheckpointError> {
        let len = self.u32()? as usize;
        let at = self.pos;
        std::str::from_utf8(self.take(len)?).map_err(|_| CheckpointError::Corrupt {
            offset: at,
            msg: format!("{what} is not UTF-8"),
        })
    }
}

pub fn decode(bytes: &[u8]) -> Result<(ParamSet<f32>, NetworkConfig), CheckpointError> {
    let mut r = Reader { bytes, pos: 0 };
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    r.pos = MAGIC.len();
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version { found: version });
    }
    let cfg = NetworkConfig::from_kv(r.text("config")?).map_err(CheckpointError::Config)?;
    let count = r.u32()?;
    let mut params = ParamSet::new();
    let mut seen = HashSet::new();
    for _ in 0..count {
        let start = r.pos;
        let name = r.text("parameter name")?.to_string();
        let rank = r.u32()? as usize;
        let mut dims = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            dims.push(r.u64()? as usize);
        }
        let at = r.pos;
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| CheckpointError::Corrupt {
                offset: at,
                msg: format!("dims {dims:?} overflow"),
            })?;
        let values: Vec<f32> = r
            .take(n)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let body_end = r.pos;
        let crc = r.u32()?;
        if crc != crc32fast::hash(&bytes[start..body_end]) {
            return Err(CheckpointError::Checksum(name));
        }
        if !seen.insert(name.clone()) {
            return Err(CheckpointError::Duplicate(name));
        }
        let t = Tensor::new(dims, values).map_err(|e| CheckpointError::Corrupt {
            offset: at,
            msg: e.to_string(),
        })?;
        params.insert(name, t).map_err(|e| CheckpointError::Corrupt {
            offset: start,
            msg: e.to_string(),
        })?;
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Corrupt {
            offset: r.pos,
            msg: format!("{} trailing bytes", bytes.len() - r.pos),
        });
    }
    Ok((params, cfg))
}

pub fn save_checkpoint(params: &ParamSet<f32>, cfg: &NetworkConfig, path: &Path) -> Result<(), CheckpointError> {
    fs::write(path, encode(params, cfg)).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamSet<f32>, NetworkConfig), CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode(&bytes)
}
