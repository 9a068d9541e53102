//! Versioned parameter container.
//!
//! Layout (little-endian): magic `NPAC`, version u16, 32-byte SHA-256
//! fingerprint of the config document, config length u32 + UTF-8 JSON,
//! parameter count u32, then per parameter: name length u16 + UTF-8 name,
//! rank u8, rank × u32 extents, f64 payload.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::autograd::{Params, Tensor};

use super::{ByteReader, DataError};

const MAGIC: &[u8; 4] = b"NPAC";
const VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Resolved experiment config, serialized as JSON.
    pub config: String,
    pub params: Params,
}

impl Checkpoint {
    pub fn fingerprint(&self) -> String {
        config_fingerprint(&self.config)
    }
}

pub fn config_fingerprint(config: &str) -> String {
    Sha256::digest(config.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn write_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&Sha256::digest(ckpt.config.as_bytes()));
    out.extend_from_slice(&(ckpt.config.len() as u32).to_le_bytes());
    out.extend_from_slice(ckpt.config.as_bytes());
    out.extend_from_slice(&(ckpt.params.len() as u32).to_le_bytes());
    for (_, name, value) in ckpt.params.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(value.rank() as u8);
        for d in value.shape() {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint, DataError> {
    let mut r = ByteReader::new(bytes);
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(DataError::BadMagic {
            offset: 0,
            expected: MAGIC,
            found: magic.to_vec(),
        });
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(DataError::UnsupportedVersion {
            offset: 4,
            version: version.into(),
        });
    }
    let stored: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let config_offset = r.offset();
    let config_len = r.u32()? as usize;
    let config = std::str::from_utf8(r.take(config_len)?)
        .map_err(|_| DataError::Malformed {
            offset: config_offset + 4,
            reason: "config is not UTF-8".into(),
        })?
        .to_string();
    let computed: [u8; 32] = Sha256::digest(config.as_bytes()).into();
    if stored != computed {
        let hex = |b: &[u8]| b.iter().map(|x| format!("{x:02x}")).collect::<String>();
        return Err(DataError::Fingerprint {
            expected: hex(&stored),
            found: hex(&computed),
        });
    }

    let count = r.u32()? as usize;
    let mut params = Params::new();
    for _ in 0..count {
        let name_offset = r.offset();
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| DataError::Malformed {
                offset: name_offset + 2,
                reason: "parameter name is not UTF-8".into(),
            })?
            .to_string();
        let rank_offset = r.offset();
        let rank = r.u8()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, d| acc.checked_mul(*d))
            .ok_or_else(|| DataError::Malformed {
                offset: rank_offset,
                reason: format!("shape {shape:?} overflows"),
            })?;
        if numel.checked_mul(8).is_none_or(|n| n > r.remaining()) {
            return Err(DataError::Truncated {
                expected: r.offset().saturating_add(numel.saturating_mul(8)),
                actual: bytes.len(),
            });
        }
        let data = r.f64_payload(numel)?;
        let tensor = Tensor::new(shape, data).map_err(|e| DataError::Malformed {
            offset: rank_offset,
            reason: e.to_string(),
        })?;
        params.insert(name, tensor);
    }
    r.finish()?;
    Ok(Checkpoint { config, params })
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<(), DataError> {
    fs::write(path, write_checkpoint(ckpt))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, DataError> {
    read_checkpoint(&fs::read(path)?)
}
