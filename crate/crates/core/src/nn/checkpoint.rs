//! Single-file checkpoints.
//!
//! Layout: 8-byte magic, `u64` little-endian header length, a JSON header
//! (format version, architecture, tensor table, SHA-256 of the payload),
//! then the raw little-endian float64 payload. Tensors are laid out in
//! [`ModelSnapshot::tensors`] order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::arch::Architecture;
use super::model::{ModelSnapshot, ParamKey};
use crate::dataset::hex_prefix;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"UNLCKPT\n";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub key: ParamKey,
    pub shape: Vec<usize>,
    /// Offset into the payload, in elements.
    pub offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub dtype: String,
    pub architecture: Architecture,
    pub tensors: Vec<TensorEntry>,
    pub payload_bytes: usize,
    pub sha256: String,
    /// Free-form provenance such as the config fingerprint.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, String>,
}

pub fn encode(model: &ModelSnapshot) -> Result<Vec<u8>> {
    encode_with(model, &BTreeMap::new())
}

pub fn encode_with(model: &ModelSnapshot, metadata: &BTreeMap<String, String>) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    let mut offset = 0;
    for (key, t) in model.tensors() {
        tensors.push(TensorEntry {
            key,
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.len();
        for v in t.iter() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        dtype: "f64".into(),
        architecture: model.architecture().clone(),
        tensors,
        payload_bytes: payload.len(),
        sha256: hex_prefix(&Sha256::digest(&payload), 64),
        metadata: metadata.clone(),
    };
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn save(model: &ModelSnapshot, path: &Path) -> Result<()> {
    save_with(model, path, &BTreeMap::new())
}

pub fn save_with(model: &ModelSnapshot, path: &Path, metadata: &BTreeMap<String, String>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, encode_with(model, metadata)?).map_err(|e| Error::io(path, e))
}

/// Parses only the header, without verifying the payload.
pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, _) = split(&bytes, path)?;
    Ok(header)
}

fn split<'a>(bytes: &'a [u8], path: &Path) -> Result<(CheckpointHeader, &'a [u8])> {
    let corrupt = |reason: String| Error::Corrupt {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(corrupt("missing checkpoint magic".into()));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = &bytes[16..];
    if header_len > body.len() {
        return Err(corrupt(format!("header length {header_len} exceeds file")));
    }
    let header: CheckpointHeader =
        serde_json::from_slice(&body[..header_len]).map_err(|e| corrupt(format!("bad header: {e}")))?;
    Ok((header, &body[header_len..]))
}

pub fn load(path: &Path) -> Result<ModelSnapshot> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<ModelSnapshot> {
    let corrupt = |reason: String| Error::Corrupt {
        path: path.to_path_buf(),
        reason,
    };
    let (header, payload) = split(bytes, path)?;
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            found: header.version,
            expected: CHECKPOINT_VERSION,
        });
    }
    if header.dtype != "f64" {
        return Err(corrupt(format!("unsupported dtype {}", header.dtype)));
    }
    if payload.len() != header.payload_bytes {
        return Err(corrupt(format!(
            "payload is {} bytes, header says {}",
            payload.len(),
            header.payload_bytes
        )));
    }
    if hex_prefix(&Sha256::digest(payload), 64) != header.sha256 {
        return Err(Error::Integrity {
            path: path.to_path_buf(),
            reason: "payload SHA-256 does not match header".into(),
        });
    }

    let mut model = ModelSnapshot::init(header.architecture.clone(), 0)?;
    let keys: Vec<_> = model.tensors().into_iter().map(|(k, t)| (k, t.shape().to_vec())).collect();
    if keys.len() != header.tensors.len() {
        return Err(corrupt("tensor table does not match architecture".into()));
    }
    for ((key, shape), entry) in keys.iter().zip(&header.tensors) {
        if *key != entry.key || *shape != entry.shape {
            return Err(corrupt(format!("unexpected tensor {} {:?}", entry.key, entry.shape)));
        }
        let len: usize = shape.iter().product();
        let start = entry.offset * 8;
        let end = start + len * 8;
        if end > payload.len() {
            return Err(corrupt(format!("tensor {} overruns payload", entry.key)));
        }
        let mut dst = model.tensor_mut(*key).expect("key from this model");
        for (d, b) in dst.iter_mut().zip(payload[start..end].chunks_exact(8)) {
            *d = f64::from_le_bytes(b.try_into().unwrap());
        }
    }
    // Re-run shape/statistics validation on the loaded values.
    ModelSnapshot::from_parts(model.architecture().clone(), model.layers().to_vec())
}
