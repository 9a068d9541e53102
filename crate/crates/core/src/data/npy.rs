//! Reader for `.npy` arrays dumped by external tooling (e.g. feature maps of
//! a full-scale backbone). Accepts little- or big-endian `f4`/`f8`, C order,
//! rank 3 `(C,H,W)` or rank 4 `(N,C,H,W)`.

use std::fs;
use std::path::Path;

use crate::npa::FeatureVolume;

use super::{ByteReader, DataError};

const NPY_MAGIC: &[u8] = b"\x93NUMPY";

/// A rank-3 `(C,H,W)` array, or a batch of them from a rank-4 array.
#[derive(Clone, Debug, PartialEq)]
pub struct ExternalArray {
    pub volumes: Vec<FeatureVolume>,
}

#[derive(Debug)]
struct Header {
    descr: String,
    fortran_order: bool,
    shape: Vec<u64>,
}

#[derive(Debug)]
enum Literal {
    Str(String),
    Bool(bool),
    Tuple(Vec<u64>),
}

/// Parser for the Python dict literal stored in the header.
struct HeaderParser<'a> {
    text: &'a [u8],
    pos: usize,
    base: usize,
}

impl<'a> HeaderParser<'a> {
    fn err(&self, reason: impl Into<String>) -> DataError {
        DataError::Malformed {
            offset: self.base + self.pos,
            reason: reason.into(),
        }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.text.len() && self.text[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.text.get(self.pos).copied()
    }

    fn expect(&mut self, ch: u8) -> Result<(), DataError> {
        if self.peek() == Some(ch) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.err(format!("expected '{}'", ch as char)))
        }
    }

    fn string(&mut self) -> Result<String, DataError> {
        let quote = match self.peek() {
            Some(q @ (b'\'' | b'"')) => q,
            _ => return Err(self.err("expected string")),
        };
        self.pos += 1;
        let start = self.pos;
        while self.pos < self.text.len() && self.text[self.pos] != quote {
            self.pos += 1;
        }
        if self.pos >= self.text.len() {
            return Err(self.err("unterminated string"));
        }
        let s = std::str::from_utf8(&self.text[start..self.pos])
            .map_err(|_| self.err("non-utf8 string"))?
            .to_string();
        self.pos += 1;
        Ok(s)
    }

    fn integer(&mut self) -> Result<u64, DataError> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.text.len() && self.text[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err("expected integer"));
        }
        std::str::from_utf8(&self.text[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| self.err("integer out of range"))
    }

    fn literal(&mut self) -> Result<Literal, DataError> {
        match self.peek() {
            Some(b'\'' | b'"') => Ok(Literal::Str(self.string()?)),
            Some(b'(') => {
                self.pos += 1;
                let mut dims = Vec::new();
                loop {
                    if self.peek() == Some(b')') {
                        self.pos += 1;
                        break;
                    }
                    dims.push(self.integer()?);
                    match self.peek() {
                        Some(b',') => self.pos += 1,
                        Some(b')') => {}
                        _ => return Err(self.err("expected ',' or ')' in shape")),
                    }
                }
                Ok(Literal::Tuple(dims))
            }
            _ => {
                let rest = &self.text[self.pos..];
                if rest.starts_with(b"True") {
                    self.pos += 4;
                    Ok(Literal::Bool(true))
                } else if rest.starts_with(b"False") {
                    self.pos += 5;
                    Ok(Literal::Bool(false))
                } else {
                    Err(self.err("unsupported literal"))
                }
            }
        }
    }

    fn header(mut self) -> Result<Header, DataError> {
        let (mut descr, mut fortran, mut shape) = (None, None, None);
        self.expect(b'{')?;
        loop {
            if self.peek() == Some(b'}') {
                self.pos += 1;
                break;
            }
            let key = self.string()?;
            self.expect(b':')?;
            match (key.as_str(), self.literal()?) {
                ("descr", Literal::Str(s)) => descr = Some(s),
                ("fortran_order", Literal::Bool(b)) => fortran = Some(b),
                ("shape", Literal::Tuple(t)) => shape = Some(t),
                (k, v) => return Err(self.err(format!("unexpected entry {k}: {v:?}"))),
            }
            match self.peek() {
                Some(b',') => self.pos += 1,
                Some(b'}') => {}
                _ => return Err(self.err("expected ',' or '}'")),
            }
        }
        Ok(Header {
            descr: descr.ok_or_else(|| self.err("missing 'descr'"))?,
            fortran_order: fortran.ok_or_else(|| self.err("missing 'fortran_order'"))?,
            shape: shape.ok_or_else(|| self.err("missing 'shape'"))?,
        })
    }
}

pub fn read_external_array(bytes: &[u8]) -> Result<ExternalArray, DataError> {
    let mut r = ByteReader::new(bytes);
    let magic = r.take(NPY_MAGIC.len().min(bytes.len()))?;
    if magic != NPY_MAGIC {
        return Err(DataError::BadMagic {
            offset: 0,
            expected: NPY_MAGIC,
            found: magic.to_vec(),
        });
    }
    let major = r.u8()?;
    let _minor = r.u8()?;
    let header_len = match major {
        1 => r.u16()? as usize,
        2 | 3 => r.u32()? as usize,
        v => {
            return Err(DataError::UnsupportedVersion {
                offset: 6,
                version: v.into(),
            })
        }
    };
    let base = r.offset();
    let text = r.take(header_len)?;
    let header = HeaderParser { text, pos: 0, base }.header()?;

    let (big_endian, width) = match header.descr.as_str() {
        "<f8" | "=f8" => (false, 8),
        ">f8" => (true, 8),
        "<f4" | "=f4" => (false, 4),
        ">f4" => (true, 4),
        other => {
            return Err(DataError::UnsupportedDtype {
                offset: base,
                dtype: other.to_string(),
            })
        }
    };
    if header.fortran_order {
        return Err(DataError::Malformed {
            offset: base,
            reason: "fortran-ordered arrays are not supported".into(),
        });
    }
    let shape = header.shape;
    let (batch, dims) = match shape.as_slice() {
        [c, h, w] => (1u64, [*c, *h, *w]),
        [n, c, h, w] => (*n, [*c, *h, *w]),
        _ => {
            return Err(DataError::BadRank {
                rank: shape.len(),
                shape,
            })
        }
    };
    if dims.contains(&0) || batch == 0 {
        return Err(DataError::Malformed {
            offset: base,
            reason: format!("zero extent in shape {shape:?}"),
        });
    }
    let overflow = || DataError::Malformed {
        offset: base,
        reason: format!("shape {shape:?} overflows"),
    };
    let count = shape
        .iter()
        .try_fold(1u64, |acc, d| acc.checked_mul(*d))
        .and_then(|n| usize::try_from(n).ok())
        .ok_or_else(overflow)?;
    let expected = count
        .checked_mul(width)
        .and_then(|n| n.checked_add(r.offset()))
        .ok_or_else(overflow)?;
    if bytes.len() < expected {
        return Err(DataError::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(DataError::TrailingBytes {
            expected,
            actual: bytes.len(),
        });
    }

    let payload = r.take(count * width)?;
    let values: Vec<f64> = if width == 8 {
        payload
            .chunks_exact(8)
            .map(|b| {
                let b: [u8; 8] = b.try_into().expect("8 bytes");
                if big_endian {
                    f64::from_be_bytes(b)
                } else {
                    f64::from_le_bytes(b)
                }
            })
            .collect()
    } else {
        payload
            .chunks_exact(4)
            .map(|b| {
                let b: [u8; 4] = b.try_into().expect("4 bytes");
                f64::from(if big_endian {
                    f32::from_be_bytes(b)
                } else {
                    f32::from_le_bytes(b)
                })
            })
            .collect()
    };

    let [c, h, w] = dims.map(|d| d as usize);
    let volumes = values
        .chunks_exact(c * h * w)
        .map(|chunk| FeatureVolume::new(c, h, w, chunk.to_vec()).expect("extents checked"))
        .collect();
    Ok(ExternalArray { volumes })
}

pub fn read_external_array_file(path: impl AsRef<Path>) -> Result<ExternalArray, DataError> {
    read_external_array(&fs::read(path)?)
}
