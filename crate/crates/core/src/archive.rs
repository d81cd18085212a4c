//! Binary checkpoint container shared by weight stores, training states and
//! predictors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   "EARDCKPT"
//! version      u32       FORMAT_VERSION
//! desc_len     u64       byte length of the descriptor
//! descriptor   UTF-8 JSON {"kind", "meta", "arrays": [{"name", "shape"}]}
//! payload      for each descriptor array, in order: its values as f64
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::array::Array;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"EARDCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Descriptor {
    kind: String,
    meta: serde_json::Value,
    arrays: Vec<ArrayDesc>,
}

#[derive(Serialize, Deserialize)]
struct ArrayDesc {
    name: String,
    shape: Vec<usize>,
}

/// A named collection of arrays plus JSON metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Archive {
    pub kind: String,
    pub meta: serde_json::Value,
    pub arrays: Vec<(String, Array)>,
}

impl Archive {
    pub fn new(kind: &str, meta: serde_json::Value) -> Self {
        Self { kind: kind.to_string(), meta, arrays: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, array: Array) {
        self.arrays.push((name.into(), array));
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    pub fn take(&mut self, name: &str) -> Result<Array> {
        let pos = self
            .arrays
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::Format(format!("archive has no array {name:?}")))?;
        Ok(self.arrays.remove(pos).1)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Format(format!("expected a {kind:?} archive, found {:?}", self.kind)));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let desc = Descriptor {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            arrays: self
                .arrays
                .iter()
                .map(|(n, a)| ArrayDesc { name: n.clone(), shape: a.shape().to_vec() })
                .collect(),
        };
        let desc = serde_json::to_vec(&desc).expect("descriptor serializes");
        let payload: usize = self.arrays.iter().map(|(_, a)| a.len() * 8).sum();
        let mut out = Vec::with_capacity(20 + desc.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(desc.len() as u64).to_le_bytes());
        out.extend_from_slice(&desc);
        for (_, a) in &self.arrays {
            for v in a.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        Self::read_from(&mut r)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let truncated = |e: std::io::Error| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::Format("truncated checkpoint".into()),
            _ => Error::Io(e),
        };
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != MAGIC {
            return Err(Error::Format("bad magic bytes".into()));
        }
        let mut u32b = [0u8; 4];
        r.read_exact(&mut u32b).map_err(truncated)?;
        let version = u32::from_le_bytes(u32b);
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported format version {version}")));
        }
        let mut u64b = [0u8; 8];
        r.read_exact(&mut u64b).map_err(truncated)?;
        let len = u64::from_le_bytes(u64b) as usize;
        let mut desc = vec![0u8; len];
        r.read_exact(&mut desc).map_err(truncated)?;
        let desc: Descriptor = serde_json::from_slice(&desc).map_err(|e| Error::Format(e.to_string()))?;
        let mut arrays = Vec::with_capacity(desc.arrays.len());
        for d in desc.arrays {
            let n: usize = d.shape.iter().product();
            let mut raw = vec![0u8; n * 8];
            r.read_exact(&mut raw).map_err(truncated)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            arrays.push((d.name, Array::new(d.shape, data)?));
        }
        Ok(Self { kind: desc.kind, meta: desc.meta, arrays })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
