//! Binary parameter checkpoints.
//!
//! Byte layout, all integers little-endian:
//!
//! | offset     | size | content                                   |
//! |------------|------|-------------------------------------------|
//! | 0          | 8    | magic `CTXASRCK`                          |
//! | 8          | 4    | `u32` format version                      |
//! | 12         | 8    | `u64` manifest length `M`                 |
//! | 20         | M    | UTF-8 JSON [`Manifest`]                   |
//! | 20 + M     | 4·N  | `f32` payload, tensors in manifest order  |
//!
//! The manifest records each tensor's name, shape and frozen flag, the
//! payload length and its SHA-256, and a snapshot of the model config.

use std::path::Path;

use ctxasr_nn::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MAGIC: &[u8; 8] = b"CTXASRCK";
pub const FORMAT_VERSION: u32 = 1;
const HEADER: usize = 20;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("cannot access checkpoint: {0}")]
    Io(String),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint integrity check failed: {0}")]
    Checksum(String),
    #[error("malformed checkpoint manifest: {0}")]
    Manifest(String),
    #[error("tensor '{name}' has shape {found:?}, model expects {expected:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint lacks tensor '{0}'")]
    MissingTensor(String),
    #[error("checkpoint has unexpected tensor '{0}'")]
    UnexpectedTensor(String),
    #[error("checkpoint holds a {found} model, expected {expected}")]
    Kind { found: String, expected: String },
}

impl CheckpointError {
    pub fn code(&self) -> &'static str {
        match self {
            CheckpointError::Io(_) => "checkpoint-io",
            CheckpointError::BadMagic => "checkpoint-magic",
            CheckpointError::Version { .. } => "checkpoint-version",
            CheckpointError::Checksum(_) => "checkpoint-checksum",
            CheckpointError::Manifest(_) => "checkpoint-manifest",
            CheckpointError::Shape { .. } => "checkpoint-shape",
            CheckpointError::MissingTensor(_) => "checkpoint-missing-tensor",
            CheckpointError::UnexpectedTensor(_) => "checkpoint-unexpected-tensor",
            CheckpointError::Kind { .. } => "checkpoint-kind",
        }
    }
}

type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub frozen: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: String,
    pub tensors: Vec<TensorEntry>,
    pub payload_bytes: u64,
    pub payload_sha256: String,
    pub config: serde_json::Value,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub params: ParamStore<f32>,
}

impl Checkpoint {
    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.manifest.kind == kind {
            Ok(())
        } else {
            Err(CheckpointError::Kind {
                found: self.manifest.kind.clone(),
                expected: kind.into(),
            })
        }
    }
}

pub fn encode(params: &ParamStore<f32>, kind: &str, config: serde_json::Value) -> Vec<u8> {
    let mut payload = Vec::with_capacity(params.num_scalars() * 4);
    for e in params.entries() {
        for x in e.value.data() {
            payload.extend_from_slice(&x.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        kind: kind.into(),
        tensors: params
            .entries()
            .iter()
            .map(|e| TensorEntry {
                name: e.name.clone(),
                shape: e.value.shape().to_vec(),
                frozen: e.frozen,
            })
            .collect(),
        payload_bytes: payload.len() as u64,
        payload_sha256: hex::encode(Sha256::digest(&payload)),
        config,
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(HEADER + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    out
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if bytes.len() < HEADER {
        return Err(CheckpointError::Checksum("file ends inside the header".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let m_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = &bytes[HEADER..];
    if body.len() < m_len {
        return Err(CheckpointError::Checksum(format!(
            "manifest needs {m_len} bytes, only {} present",
            body.len()
        )));
    }
    let manifest: Manifest =
        serde_json::from_slice(&body[..m_len]).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
    let payload = &body[m_len..];
    if payload.len() as u64 != manifest.payload_bytes {
        return Err(CheckpointError::Checksum(format!(
            "payload has {} bytes, manifest declares {}",
            payload.len(),
            manifest.payload_bytes
        )));
    }
    if hex::encode(Sha256::digest(payload)) != manifest.payload_sha256 {
        return Err(CheckpointError::Checksum("payload digest mismatch".into()));
    }
    let declared: usize = manifest.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    if declared * 4 != payload.len() {
        return Err(CheckpointError::Manifest(format!(
            "tensors declare {declared} values but the payload holds {}",
            payload.len() / 4
        )));
    }
    let mut params = ParamStore::new();
    let mut offset = 0;
    for t in &manifest.tensors {
        let n: usize = t.shape.iter().product();
        let data = payload[offset..offset + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        offset += 4 * n;
        let value = Tensor::new(t.shape.clone(), data).map_err(|e| CheckpointError::Manifest(e.to_string()))?;
        let id = params
            .add(t.name.clone(), value)
            .map_err(|e| CheckpointError::Manifest(e.to_string()))?;
        params.set_frozen(id, t.frozen);
    }
    Ok(Checkpoint { manifest, params })
}

pub fn save_checkpoint(path: &Path, params: &ParamStore<f32>, kind: &str, config: serde_json::Value) -> Result<()> {
    std::fs::write(path, encode(params, kind, config)).map_err(|e| CheckpointError::Io(format!("{}: {e}", path.display())))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| CheckpointError::Io(format!("{}: {e}", path.display())))?;
    decode(&bytes)
}

/// Copies every tensor of `source` into the identically named tensor of
/// `target`. Both must hold exactly the same names and shapes.
pub fn restore_into(target: &mut ParamStore<f32>, source: &ParamStore<f32>) -> Result<()> {
    for e in source.entries() {
        if target.id(&e.name).is_none() {
            return Err(CheckpointError::UnexpectedTensor(e.name.clone()));
        }
    }
    let ids: Vec<_> = target.ids().collect();
    for id in ids {
        let name = target.name(id).to_string();
        let src = source.id(&name).ok_or_else(|| CheckpointError::MissingTensor(name.clone()))?;
        let value = source.get(src);
        if value.shape() != target.get(id).shape() {
            return Err(CheckpointError::Shape {
                name,
                expected: target.get(id).shape().to_vec(),
                found: value.shape().to_vec(),
            });
        }
        *target.get_mut(id) = value.clone();
    }
    Ok(())
}

/// Hex SHA-256 of a file's bytes.
pub fn file_sha256(path: &Path) -> std::io::Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}
