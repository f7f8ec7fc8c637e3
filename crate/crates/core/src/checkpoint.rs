//! Self-describing parameter files.
//!
//! Layout: one line of JSON (the header), then the parameters as
//! little-endian `f64`. The header's `content_hash` is the SHA-256 of the
//! serialized `meta` followed by the parameter bytes.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format: String,
    kind: String,
    meta: serde_json::Value,
    param_count: usize,
    content_hash: String,
}

const FORMAT: &str = "embryogen-ckpt-1";

fn hash(meta: &serde_json::Value, params: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(meta.to_string().as_bytes());
    h.update(params);
    hex::encode(h.finalize())
}

fn param_bytes(params: &[f64]) -> Vec<u8> {
    params.iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Encodes a checkpoint and returns `(bytes, content_hash)`.
pub fn encode<M: Serialize>(kind: &str, meta: &M, params: &[f64]) -> Result<(Vec<u8>, String)> {
    let meta = serde_json::to_value(meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let blob = param_bytes(params);
    let content_hash = hash(&meta, &blob);
    let header = Header {
        format: FORMAT.into(),
        kind: kind.into(),
        meta,
        param_count: params.len(),
        content_hash: content_hash.clone(),
    };
    let mut out = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    out.push(b'\n');
    out.extend_from_slice(&blob);
    Ok((out, content_hash))
}

pub fn decode<M: DeserializeOwned>(kind: &str, bytes: &[u8]) -> Result<(M, Vec<f64>, String)> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Checkpoint("missing header line".into()))?;
    let header: Header =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    if header.format != FORMAT {
        return Err(Error::Checkpoint(format!("unsupported format `{}`", header.format)));
    }
    if header.kind != kind {
        return Err(Error::Checkpoint(format!("expected a `{kind}` checkpoint, found `{}`", header.kind)));
    }
    let blob = &bytes[nl + 1..];
    if blob.len() != header.param_count * 8 {
        return Err(Error::Checkpoint(format!(
            "expected {} parameter bytes, found {}",
            header.param_count * 8,
            blob.len()
        )));
    }
    if hash(&header.meta, blob) != header.content_hash {
        return Err(Error::Checkpoint("content hash mismatch".into()));
    }
    let params = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let meta = serde_json::from_value(header.meta).map_err(|e| Error::Checkpoint(format!("bad metadata: {e}")))?;
    Ok((meta, params, header.content_hash))
}

pub fn save<M: Serialize>(path: &Path, kind: &str, meta: &M, params: &[f64]) -> Result<String> {
    let (bytes, h) = encode(kind, meta, params)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    Ok(h)
}

pub fn load<M: DeserializeOwned>(path: &Path, kind: &str) -> Result<(M, Vec<f64>, String)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(kind, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_tamper_detection() {
        let params = vec![1.5, -0.0, f64::MIN_POSITIVE, 3e300];
        let (mut bytes, h) = encode("toy", &serde_json::json!({"epoch": 3}), &params).unwrap();
        let (meta, back, h2): (serde_json::Value, Vec<f64>, String) = decode("toy", &bytes).unwrap();
        assert_eq!(meta["epoch"], 3);
        assert_eq!(h, h2);
        assert_eq!(back.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), params.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert!(decode::<serde_json::Value>("other", &bytes).is_err());
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        assert!(matches!(decode::<serde_json::Value>("toy", &bytes), Err(Error::Checkpoint(_))));
    }
}
