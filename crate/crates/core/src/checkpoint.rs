//! Checkpoint container: a little-endian `u64` header length, a JSON
//! header, then raw little-endian `f64` blobs in the order the header lists
//! them.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "corrflow-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
/// Refuse headers larger than this when reading.
const MAX_HEADER: u64 = 64 << 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobInfo {
    pub name: String,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    kind: String,
    blobs: Vec<BlobInfo>,
    meta: Value,
}

/// A decoded checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: Value,
    pub blobs: BTreeMap<String, Vec<f64>>,
}

impl Checkpoint {
    pub fn new(kind: &str, meta: Value) -> Self {
        Self { kind: kind.into(), meta, blobs: BTreeMap::new() }
    }

    pub fn with_blob(mut self, name: &str, data: Vec<f64>) -> Self {
        self.blobs.insert(name.into(), data);
        self
    }

    pub fn blob(&self, name: &str) -> Result<&[f64]> {
        self.blobs
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Format(format!("checkpoint has no blob {name:?}")))
    }

    /// Blob `name`, which must hold exactly `len` values.
    pub fn blob_len(&self, name: &str, len: usize) -> Result<&[f64]> {
        let b = self.blob(name)?;
        if b.len() != len {
            return Err(Error::Format(format!("blob {name:?} has {} values, expected {len}", b.len())));
        }
        Ok(b)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Format(format!("expected a {kind} checkpoint, found {}", self.kind)));
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let header = Header {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            kind: self.kind.clone(),
            blobs: self.blobs.iter().map(|(n, b)| BlobInfo { name: n.clone(), len: b.len() }).collect(),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for b in self.blobs.values() {
            let mut bytes = Vec::with_capacity(8 * b.len());
            for v in b {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&bytes)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut len = [0u8; 8];
        r.read_exact(&mut len).map_err(|_| Error::Format("checkpoint shorter than its length prefix".into()))?;
        let len = u64::from_le_bytes(len);
        if len > MAX_HEADER {
            return Err(Error::Format(format!("checkpoint header of {len} bytes is implausible")));
        }
        let mut json = vec![0u8; len as usize];
        r.read_exact(&mut json).map_err(|_| Error::Format("truncated checkpoint header".into()))?;
        let header: Header =
            serde_json::from_slice(&json).map_err(|e| Error::Format(format!("bad checkpoint header: {e}")))?;
        if header.format != CHECKPOINT_FORMAT || header.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint {} v{}",
                header.format, header.version
            )));
        }
        let mut blobs = BTreeMap::new();
        for info in header.blobs {
            let mut bytes = vec![0u8; 8 * info.len];
            r.read_exact(&mut bytes)
                .map_err(|_| Error::Format(format!("truncated blob {:?}", info.name)))?;
            let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            blobs.insert(info.name, data);
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Format("trailing bytes after the last blob".into()));
        }
        Ok(Self { kind: header.kind, meta: header.meta, blobs })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }

    /// Deserializes the header's metadata.
    pub fn meta_as<T: serde::de::DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_value(self.meta.clone()).map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))
    }
}
