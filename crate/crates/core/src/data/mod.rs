//! Datasets and on-disk formats.

mod checkpoint;
mod npy;
mod shapes;
mod volume_file;

use thiserror::Error;

pub use checkpoint::{
    config_fingerprint, load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint,
    Checkpoint,
};
pub use npy::{read_external_array, read_external_array_file, ExternalArray};
pub use shapes::{generate_shapes, Sample, ShapeKind, ShapesDataset, ShapesSpec};
pub use volume_file::{
    read_volume, read_volume_file, write_volume, write_volume_file, DTYPE_F64, VOLUME_MAGIC,
    VOLUME_VERSION,
};

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad magic at offset {offset}: expected {expected:?}, found {found:?}")]
    BadMagic {
        offset: usize,
        expected: &'static [u8],
        found: Vec<u8>,
    },
    #[error("unsupported format version {version} at offset {offset}")]
    UnsupportedVersion { offset: usize, version: u32 },
    #[error("unsupported dtype {dtype} at offset {offset}")]
    UnsupportedDtype { offset: usize, dtype: String },
    #[error("truncated input: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("unexpected trailing data: expected {expected} bytes, found {actual}")]
    TrailingBytes { expected: usize, actual: usize },
    #[error("unsupported array rank {rank} (shape {shape:?}); expected 3 (C,H,W) or 4 (N,C,H,W)")]
    BadRank { rank: usize, shape: Vec<u64> },
    #[error("malformed input at offset {offset}: {reason}")]
    Malformed { offset: usize, reason: String },
    #[error("config fingerprint mismatch: header {expected}, computed {found}")]
    Fingerprint { expected: String, found: String },
    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),
}

/// Little-endian cursor over a byte slice that reports offsets in errors.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub fn offset(&self) -> usize {
        self.pos
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], DataError> {
        if self.remaining() < n {
            return Err(DataError::Truncated {
                expected: self.pos + n,
                actual: self.bytes.len(),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8, DataError> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16, DataError> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    pub fn u32(&mut self) -> Result<u32, DataError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    /// Reads `count` f64 values after checking the exact byte budget.
    pub fn f64_payload(&mut self, count: usize) -> Result<Vec<f64>, DataError> {
        let need = count.checked_mul(8).ok_or_else(|| DataError::Malformed {
            offset: self.pos,
            reason: "payload size overflows".into(),
        })?;
        let raw = self.take(need)?;
        Ok(raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect())
    }

    pub fn finish(&self) -> Result<(), DataError> {
        if self.remaining() != 0 {
            return Err(DataError::TrailingBytes {
                expected: self.pos,
                actual: self.bytes.len(),
            });
        }
        Ok(())
    }
}
