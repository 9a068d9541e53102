//! Binary feature-volume container.
//!
//! Layout (all little-endian):
//!
//! | offset | size   | field                      |
//! |--------|--------|----------------------------|
//! | 0      | 4      | magic `NPAV`               |
//! | 4      | 2      | format version (`1`)       |
//! | 6      | 2      | dtype tag (`1` = f64)      |
//! | 8      | 4·3    | C, H, W as u32             |
//! | 20     | 8·CHW  | row-major f64 payload      |

use std::fs;
use std::path::Path;

use crate::npa::FeatureVolume;

use super::{ByteReader, DataError};

pub const VOLUME_MAGIC: &[u8; 4] = b"NPAV";
pub const VOLUME_VERSION: u16 = 1;
pub const DTYPE_F64: u16 = 1;

pub fn write_volume(volume: &FeatureVolume) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + 8 * volume.data().len());
    out.extend_from_slice(VOLUME_MAGIC);
    out.extend_from_slice(&VOLUME_VERSION.to_le_bytes());
    out.extend_from_slice(&DTYPE_F64.to_le_bytes());
    for d in [volume.channels(), volume.height(), volume.width()] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in volume.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn read_volume(bytes: &[u8]) -> Result<FeatureVolume, DataError> {
    let mut r = ByteReader::new(bytes);
    let magic = r.take(4)?;
    if magic != VOLUME_MAGIC {
        return Err(DataError::BadMagic {
            offset: 0,
            expected: VOLUME_MAGIC,
            found: magic.to_vec(),
        });
    }
    let version = r.u16()?;
    if version != VOLUME_VERSION {
        return Err(DataError::UnsupportedVersion {
            offset: 4,
            version: version.into(),
        });
    }
    let dtype = r.u16()?;
    if dtype != DTYPE_F64 {
        return Err(DataError::UnsupportedDtype {
            offset: 6,
            dtype: format!("tag {dtype}"),
        });
    }
    let dims = [r.u32()? as usize, r.u32()? as usize, r.u32()? as usize];
    if dims.contains(&0) {
        return Err(DataError::Malformed {
            offset: 8,
            reason: format!("zero extent in dims {dims:?}"),
        });
    }
    let count = dims
        .iter()
        .try_fold(1usize, |acc, d| acc.checked_mul(*d))
        .ok_or_else(|| DataError::Malformed {
            offset: 8,
            reason: format!("dims {dims:?} overflow"),
        })?;
    let expected = count.checked_mul(8).and_then(|n| n.checked_add(20));
    match expected {
        Some(e) if e > bytes.len() => {
            return Err(DataError::Truncated {
                expected: e,
                actual: bytes.len(),
            })
        }
        None => {
            return Err(DataError::Malformed {
                offset: 8,
                reason: format!("dims {dims:?} overflow"),
            })
        }
        _ => {}
    }
    let data = r.f64_payload(count)?;
    r.finish()?;
    FeatureVolume::new(dims[0], dims[1], dims[2], data).map_err(|e| DataError::Malformed {
        offset: 8,
        reason: e.to_string(),
    })
}

pub fn write_volume_file(path: impl AsRef<Path>, volume: &FeatureVolume) -> Result<(), DataError> {
    fs::write(path, write_volume(volume))?;
    Ok(())
}

pub fn read_volume_file(path: impl AsRef<Path>) -> Result<FeatureVolume, DataError> {
    read_volume(&fs::read(path)?)
}
