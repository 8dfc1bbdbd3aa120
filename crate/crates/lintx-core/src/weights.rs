//! LSTW weight container.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "LSTW"                      4-byte magic
//! version: u16                currently 1
//! spec_hash: u64              FNV-1a of the architecture description
//! records...                  until 4 bytes remain
//! crc32: u32                  CRC32 of every byte above
//! ```
//!
//! Each record: name_len u16, name bytes (UTF-8), rank u8, rank extents as
//! u32, then product(extents) f32 payload values. Values are stored in 32
//! bits; in-memory f64 values are rounded exactly once on save, so a
//! save-load-save cycle reproduces the file byte for byte.

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;
use indexmap::IndexMap;
use std::path::Path;

pub const WEIGHT_FORMAT_VERSION: u16 = 1;
const MAGIC: &[u8; 4] = b"LSTW";

/// 64-bit FNV-1a; used for architecture fingerprints because it is stable
/// across platforms and runs, unlike the std hasher.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Ordered name -> tensor map plus the architecture fingerprint it was
/// saved for. Iteration order is insertion order and survives round trips.
#[derive(Debug, Clone)]
pub struct WeightStore {
    spec_hash: u64,
    entries: IndexMap<String, Tensor>,
}

impl WeightStore {
    pub fn new(spec_hash: u64) -> Self {
        Self { spec_hash, entries: IndexMap::new() }
    }

    pub fn spec_hash(&self) -> u64 {
        self.spec_hash
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(CoreError::WeightFormat(format!("duplicate tensor name {name:?}")));
        }
        if name.len() > u16::MAX as usize {
            return Err(CoreError::WeightFormat("tensor name longer than 65535 bytes".into()));
        }
        self.entries.insert(name.to_string(), tensor);
        Ok(())
    }

    /// Overwrites an existing tensor. The name must already be present and
    /// the shape must match, so training can update values but never
    /// silently change the architecture. Insertion order is preserved.
    pub fn replace(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        match self.entries.get_mut(name) {
            None => Err(CoreError::WeightFormat(format!("no tensor named {name:?} to replace"))),
            Some(slot) if slot.shape() != tensor.shape() => Err(CoreError::ShapeMismatch(format!(
                "replace {name:?}: {:?} vs stored {:?}",
                tensor.shape(),
                slot.shape()
            ))),
            Some(slot) => {
                *slot = tensor;
                Ok(())
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&WEIGHT_FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.spec_hash.to_le_bytes());
        for (name, tensor) in &self.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let shape = tensor.shape();
            if shape.len() > u8::MAX as usize {
                return Err(CoreError::WeightFormat(format!("tensor {name:?} rank too large")));
            }
            out.push(shape.len() as u8);
            for &e in shape {
                if e > u32::MAX as usize {
                    return Err(CoreError::WeightFormat(format!(
                        "tensor {name:?} extent {e} exceeds u32"
                    )));
                }
                out.extend_from_slice(&(e as u32).to_le_bytes());
            }
            for &v in tensor.data() {
                let f = v as f32;
                if !f.is_finite() {
                    return Err(CoreError::NonFinite(format!(
                        "tensor {name:?} value {v} does not fit 32-bit storage"
                    )));
                }
                out.extend_from_slice(&f.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 2 + 8 + 4 {
            return Err(CoreError::WeightFormat("truncated file: header incomplete".into()));
        }
        let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(crc_bytes.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(CoreError::ChecksumMismatch { stored, computed });
        }
        if &body[..4] != MAGIC {
            return Err(CoreError::WeightFormat(format!(
                "bad magic {:?}, expected \"LSTW\"",
                &body[..4]
            )));
        }
        let version = u16::from_le_bytes(body[4..6].try_into().expect("2 bytes"));
        if version != WEIGHT_FORMAT_VERSION {
            return Err(CoreError::WeightFormat(format!(
                "unsupported format version {version}, expected {WEIGHT_FORMAT_VERSION}"
            )));
        }
        let spec_hash = u64::from_le_bytes(body[6..14].try_into().expect("8 bytes"));
        let mut store = Self::new(spec_hash);

        let mut pos = 14;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > body.len() {
                return Err(CoreError::WeightFormat(format!(
                    "truncated file: needed {n} bytes at offset {pos}",
                    pos = *pos
                )));
            }
            let s = &body[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };

        while pos < body.len() {
            let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(take(&mut pos, name_len)?)
                .map_err(|_| CoreError::WeightFormat("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = take(&mut pos, 1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let e = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
                shape.push(e);
            }
            let count: usize = shape.iter().product();
            let payload = take(&mut pos, count * 4)?;
            let mut data = Vec::with_capacity(count);
            for chunk in payload.chunks_exact(4) {
                let f = f32::from_le_bytes(chunk.try_into().unwrap());
                if !f.is_finite() {
                    return Err(CoreError::NonFinite(format!(
                        "tensor {name:?} payload contains {f}"
                    )));
                }
                data.push(f as f64);
            }
            let tensor = Tensor::new(&shape, data)?;
            store.insert(&name, tensor)?;
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}
