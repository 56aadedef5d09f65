//! Directory archive of named tensors: `manifest.json` (shapes, offsets,
//! payload hash, free-form metadata) next to a raw little-endian `payload.bin`.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::tensor::{Scalar, Tensor};

pub const FORMAT: &str = "desklm-archive";
pub const VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PAYLOAD_FILE: &str = "payload.bin";

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("archive io: {0}")]
    Io(#[from] io::Error),
    #[error("archive manifest: {0}")]
    Json(#[from] serde_json::Error),
    #[error("malformed archive: {0}")]
    Format(String),
    #[error("payload checksum mismatch: manifest {expected}, payload {actual}")]
    Checksum { expected: String, actual: String },
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    dtype: String,
    payload_sha256: String,
    tensors: Vec<Entry>,
    meta: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorArchive<T> {
    pub tensors: BTreeMap<String, Tensor<T>>,
    pub meta: serde_json::Value,
}

impl<T: Scalar> TensorArchive<T> {
    pub fn new(tensors: BTreeMap<String, Tensor<T>>, meta: serde_json::Value) -> Self {
        Self { tensors, meta }
    }

    /// `(manifest, payload)` bytes.
    pub fn encode(&self) -> Result<(Vec<u8>, Vec<u8>), ArchiveError> {
        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            let bytes = t.to_le_bytes();
            entries.push(Entry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset: payload.len(),
                bytes: bytes.len(),
            });
            payload.extend_from_slice(&bytes);
        }
        let manifest = Manifest {
            format: FORMAT.into(),
            version: VERSION,
            dtype: T::DTYPE.into(),
            payload_sha256: sha256_hex(&payload),
            tensors: entries,
            meta: self.meta.clone(),
        };
        Ok((serde_json::to_vec_pretty(&manifest)?, payload))
    }

    pub fn decode(manifest: &[u8], payload: &[u8]) -> Result<Self, ArchiveError> {
        let m: Manifest = serde_json::from_slice(manifest)?;
        if m.format != FORMAT || m.version != VERSION {
            return Err(ArchiveError::Format(format!(
                "unsupported format {} v{}",
                m.format, m.version
            )));
        }
        if m.dtype != T::DTYPE {
            return Err(ArchiveError::Format(format!(
                "archive holds {}, expected {}",
                m.dtype,
                T::DTYPE
            )));
        }
        let actual = sha256_hex(payload);
        if actual != m.payload_sha256 {
            return Err(ArchiveError::Checksum {
                expected: m.payload_sha256,
                actual,
            });
        }
        let mut tensors = BTreeMap::new();
        for e in m.tensors {
            let end = e
                .offset
                .checked_add(e.bytes)
                .filter(|&end| end <= payload.len())
                .ok_or_else(|| ArchiveError::Format(format!("`{}` overruns payload", e.name)))?;
            let t = Tensor::from_le_bytes(e.shape, &payload[e.offset..end])
                .map_err(|err| ArchiveError::Format(format!("`{}`: {err}", e.name)))?;
            if tensors.insert(e.name.clone(), t).is_some() {
                return Err(ArchiveError::Format(format!("duplicate tensor `{}`", e.name)));
            }
        }
        Ok(Self {
            tensors,
            meta: m.meta,
        })
    }

    /// Writes into `dir`, replacing the files only once both are complete.
    pub fn write(&self, dir: &Path) -> Result<(), ArchiveError> {
        fs::create_dir_all(dir)?;
        let (manifest, payload) = self.encode()?;
        let tmp_payload = dir.join(format!("{PAYLOAD_FILE}.tmp"));
        let tmp_manifest = dir.join(format!("{MANIFEST_FILE}.tmp"));
        fs::write(&tmp_payload, payload)?;
        fs::write(&tmp_manifest, manifest)?;
        fs::rename(tmp_payload, dir.join(PAYLOAD_FILE))?;
        fs::rename(tmp_manifest, dir.join(MANIFEST_FILE))?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self, ArchiveError> {
        let manifest = fs::read(dir.join(MANIFEST_FILE))?;
        let payload = fs::read(dir.join(PAYLOAD_FILE))?;
        Self::decode(&manifest, &payload)
    }
}
