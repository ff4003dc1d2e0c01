//! Named-tensor checkpoint files.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "SCOD" | version u16 | entry count u32
//! per entry: name length u16 | UTF-8 name | dtype u8 | rank u8 | rank x u32 dims | element bytes
//! CRC-32 (IEEE) of every preceding byte, u32
//! ```
//!
//! dtype codes: 1 = f32, 2 = f64.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::tensor::{Shape, Tensor};

pub const MAGIC: [u8; 4] = *b"SCOD";
pub const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint: bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {found} (this build reads {VERSION})")]
    UnsupportedVersion { found: u16 },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("truncated checkpoint: needed {needed} bytes at offset {offset}, file has {len}")]
    Truncated { offset: usize, needed: usize, len: usize },
    #[error("malformed entry {index}: {reason}")]
    Malformed { index: usize, reason: String },
    #[error("{0} trailing bytes after checksum")]
    TrailingBytes(usize),
    #[error("duplicate tensor name {0:?}")]
    DuplicateName(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl TensorData {
    pub fn shape(&self) -> Shape {
        match self {
            TensorData::F32(t) => t.shape(),
            TensorData::F64(t) => t.shape(),
        }
    }

    fn dtype(&self) -> u8 {
        match self {
            TensorData::F32(_) => 1,
            TensorData::F64(_) => 2,
        }
    }

    fn bytes(&self) -> Vec<u8> {
        match self {
            TensorData::F32(t) => t.to_le_bytes(),
            TensorData::F64(t) => t.to_le_bytes(),
        }
    }
}

/// Ordered table of named tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    entries: Vec<(String, TensorData)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, data: TensorData) -> Result<(), CheckpointError> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(CheckpointError::DuplicateName(name));
        }
        self.entries.push((name, data));
        Ok(())
    }

    pub fn push_f64(&mut self, name: impl Into<String>, t: &Tensor<f64>) -> Result<(), CheckpointError> {
        let mut t = t.clone();
        t.zero_grad();
        self.push(name, TensorData::F64(t))
    }

    pub fn push_f32(&mut self, name: impl Into<String>, t: &Tensor<f32>) -> Result<(), CheckpointError> {
        let mut t = t.clone();
        t.zero_grad();
        self.push(name, TensorData::F32(t))
    }

    pub fn get(&self, name: &str) -> Option<&TensorData> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, d)| d)
    }

    pub fn get_f64(&self, name: &str) -> Option<&Tensor<f64>> {
        match self.get(name)? {
            TensorData::F64(t) => Some(t),
            TensorData::F32(_) => None,
        }
    }

    pub fn get_f32(&self, name: &str) -> Option<&Tensor<f32>> {
        match self.get(name)? {
            TensorData::F32(t) => Some(t),
            TensorData::F64(_) => None,
        }
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &TensorData)> {
        self.entries.iter().map(|(n, d)| (n.as_str(), d))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, data) in &self.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(data.dtype());
            let dims = data.shape().dims();
            out.push(dims.len() as u8);
            for d in dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.extend_from_slice(&data.bytes());
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
        if magic != MAGIC {
            return Err(CheckpointError::BadMagic(magic));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion { found: version });
        }
        let count = r.u32()? as usize;
        let mut entries = Vec::new();
        for index in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|e| CheckpointError::Malformed {
                    index,
                    reason: format!("name is not UTF-8: {e}"),
                })?
                .to_string();
            let dtype = r.u8()?;
            let rank = r.u8()? as usize;
            if rank != 4 {
                return Err(CheckpointError::Malformed {
                    index,
                    reason: format!("rank {rank}, expected 4"),
                });
            }
            let mut dims = [0usize; 4];
            for d in &mut dims {
                *d = r.u32()? as usize;
            }
            let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
            let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| CheckpointError::Malformed {
                index,
                reason: "element count overflows".into(),
            })?;
            let data = match dtype {
                1 => {
                    let raw = r.take(numel.checked_mul(4).ok_or_else(|| r.overflow())?)?;
                    let v = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                    TensorData::F32(Tensor::new(shape, v).expect("length checked"))
                }
                2 => {
                    let raw = r.take(numel.checked_mul(8).ok_or_else(|| r.overflow())?)?;
                    let v = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                    TensorData::F64(Tensor::new(shape, v).expect("length checked"))
                }
                other => {
                    return Err(CheckpointError::Malformed {
                        index,
                        reason: format!("unknown dtype code {other}"),
                    })
                }
            };
            entries.push((name, data));
        }
        let body_len = r.pos;
        let stored = r.u32()?;
        let computed = crc32fast::hash(&bytes[..body_len]);
        if stored != computed {
            return Err(CheckpointError::Checksum { stored, computed });
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::TrailingBytes(bytes.len() - r.pos));
        }
        let mut ck = Checkpoint::new();
        for (n, d) in entries {
            ck.push(n, d)?;
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(CheckpointError::Truncated {
            offset: self.pos,
            needed: n,
            len: self.bytes.len(),
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn overflow(&self) -> CheckpointError {
        CheckpointError::Truncated {
            offset: self.pos,
            needed: usize::MAX,
            len: self.bytes.len(),
        }
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

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.push_f64("w", &Tensor::from_fn(Shape::new(2, 3, 1, 2), |i| i as f64 * 0.1 - 0.2)).unwrap();
        ck.push_f32("x", &Tensor::from_fn(Shape::new(1, 1, 2, 2), |i| -(i as f32))).unwrap();
        ck
    }

    #[test]
    fn round_trip_is_bitwise() {
        let ck = sample();
        let bytes = ck.to_bytes();
        assert_eq!(&bytes[..4], b"SCOD");
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn flipped_payload_byte_fails_checksum() {
        let mut bytes = sample().to_bytes();
        let n = bytes.len();
        bytes[n - 10] ^= 0x01;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(CheckpointError::Checksum { .. })));
    }

    #[test]
    fn newer_version_is_rejected() {
        let mut bytes = sample().to_bytes();
        bytes[4..6].copy_from_slice(&(VERSION + 1).to_le_bytes());
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(CheckpointError::UnsupportedVersion { found }) if found == VERSION + 1
        ));
    }

    #[test]
    fn truncation_is_distinct() {
        let bytes = sample().to_bytes();
        for cut in [3, 9, 20, bytes.len() - 2] {
            let err = Checkpoint::from_bytes(&bytes[..cut]).unwrap_err();
            assert!(
                matches!(err, CheckpointError::Truncated { .. } | CheckpointError::BadMagic(_)),
                "cut {cut}: {err}"
            );
        }
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 2]),
            Err(CheckpointError::Truncated { .. })
        ));
    }

    #[test]
    fn bad_magic() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(CheckpointError::BadMagic(_))));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut ck = sample();
        assert!(matches!(
            ck.push_f64("w", &Tensor::scalar(1.0)),
            Err(CheckpointError::DuplicateName(_))
        ));
    }
}
