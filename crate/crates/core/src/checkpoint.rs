//! Binary model container: magic, little-endian header length, JSON header,
//! then every tensor as little-endian `f32` in header order.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::dataset::sha256_hex;
use crate::nn::{ParamRecord, ParamStore};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"AALABCK\x01";
pub const CHECKPOINT_SCHEMA_VERSION: u64 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub schema_version: u64,
    /// Model family, e.g. `"generator"` or `"aligner"`.
    pub kind: String,
    pub config: serde_json::Value,
    pub iteration: u64,
    pub tensors: Vec<ParamRecord>,
}

pub fn encode_checkpoint<C: Serialize>(kind: &str, config: &C, iteration: u64, store: &ParamStore<f32>) -> Vec<u8> {
    let header = CheckpointHeader {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        kind: kind.into(),
        config: serde_json::to_value(config).expect("config serializes"),
        iteration,
        tensors: store.records(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let flat = store.flat_f32();
    let mut out = Vec::with_capacity(16 + json.len() + 4 * flat.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for v in flat {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Writes the checkpoint and returns the hex SHA-256 of its bytes.
pub fn save_checkpoint<C: Serialize>(
    path: &Path,
    kind: &str,
    config: &C,
    iteration: u64,
    store: &ParamStore<f32>,
) -> Result<String> {
    let bytes = encode_checkpoint(kind, config, iteration, store);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension("partial");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

pub fn decode_checkpoint(path: &Path, bytes: &[u8]) -> Result<(CheckpointHeader, Vec<f32>)> {
    let bad = |msg: &str| Error::Schema { path: path.to_path_buf(), msg: msg.into() };
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16 + len).ok_or_else(|| bad("truncated header"))?;
    let value: serde_json::Value = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
    let version = value.get("schema_version").and_then(|v| v.as_u64()).ok_or_else(|| bad("missing schema_version"))?;
    if version != CHECKPOINT_SCHEMA_VERSION {
        return Err(Error::SchemaVersion {
            path: path.to_path_buf(),
            found: version,
            expected: CHECKPOINT_SCHEMA_VERSION,
        });
    }
    let header: CheckpointHeader = serde_json::from_value(value).map_err(|e| bad(&e.to_string()))?;
    let blob = &bytes[16 + len..];
    if blob.len() % 4 != 0 {
        return Err(bad("weight blob is not a whole number of f32 values"));
    }
    let flat = blob.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
    Ok((header, flat))
}

/// Reads a checkpoint of the given kind, returning its config, iteration and weights.
pub fn load_checkpoint<C: DeserializeOwned>(path: &Path, kind: &str) -> Result<(C, u64, Vec<ParamRecord>, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (header, flat) = decode_checkpoint(path, &bytes)?;
    if header.kind != kind {
        return Err(Error::Schema {
            path: path.to_path_buf(),
            msg: format!("expected a {kind} checkpoint, found {}", header.kind),
        });
    }
    let config = serde_json::from_value(header.config)
        .map_err(|e| Error::Schema { path: path.to_path_buf(), msg: e.to_string() })?;
    Ok((config, header.iteration, header.tensors, flat))
}

/// Loads weights into a freshly built store with the same layout.
pub(crate) fn restore(path: &Path, store: &mut ParamStore<f32>, records: &[ParamRecord], flat: &[f32]) -> Result<()> {
    store.load_flat(records, flat).map_err(|msg| Error::Schema { path: path.to_path_buf(), msg })
}

pub fn file_sha256(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).map_err(|e| Error::io(path, e))?))
}
