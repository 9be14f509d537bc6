//! Checkpoint directories: `params.bin` plus `manifest.json`.
//!
//! `params.bin` is the 4-byte magic `MTPB`, one byte giving the scalar
//! width, a little-endian `u64` count, then the values little-endian.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{LayerSpec, Normalization};
use crate::scalar::Scalar;

const MAGIC: &[u8; 4] = b"MTPB";
pub const PARAMS_FILE: &str = "params.bin";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Detector,
    Classifier,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub kind: ModelKind,
    pub dtype: String,
    pub seed: u64,
    pub backbone: Vec<LayerSpec>,
    pub head: Vec<LayerSpec>,
    pub num_params: usize,
    pub params_sha256: String,
    pub normalization: Normalization,
    /// Effective training configuration.
    pub config: serde_json::Value,
    /// Model-specific settings (strides, decoder defaults, ...).
    #[serde(default)]
    pub extra: serde_json::Value,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

pub fn encode_params<T: Scalar>(params: &[T]) -> Vec<u8> {
    let mut out = Vec::with_capacity(13 + params.len() * T::BYTES);
    out.extend_from_slice(MAGIC);
    out.push(T::BYTES as u8);
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for &p in params {
        p.write_le(&mut out);
    }
    out
}

pub fn decode_params<T: Scalar>(bytes: &[u8]) -> Result<Vec<T>> {
    if bytes.len() < 13 || &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("params.bin has no valid header".into()));
    }
    if bytes[4] as usize != T::BYTES {
        return Err(Error::Checkpoint(format!(
            "params.bin stores {}-byte scalars, expected {} ({})",
            bytes[4],
            T::BYTES,
            T::DTYPE
        )));
    }
    let mut n = [0u8; 8];
    n.copy_from_slice(&bytes[5..13]);
    let count = u64::from_le_bytes(n) as usize;
    let body = &bytes[13..];
    if body.len() != count * T::BYTES {
        return Err(Error::Checkpoint(format!("params.bin declares {count} values but holds {} bytes", body.len())));
    }
    Ok(body.chunks_exact(T::BYTES).map(T::read_le).collect())
}

/// Write `params.bin` and `manifest.json` into `dir`, filling in the
/// parameter count and checksum.
pub fn save<T: Scalar>(dir: &Path, params: &[T], mut manifest: CheckpointManifest) -> Result<CheckpointManifest> {
    fs::create_dir_all(dir)?;
    let bytes = encode_params(params);
    manifest.dtype = T::DTYPE.to_string();
    manifest.num_params = params.len();
    manifest.params_sha256 = sha256_hex(&bytes);
    fs::write(dir.join(PARAMS_FILE), &bytes)?;
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Read a checkpoint, refusing it when the manifest and parameters disagree.
pub fn load<T: Scalar>(dir: &Path, kind: ModelKind) -> Result<(Vec<T>, CheckpointManifest)> {
    let manifest: CheckpointManifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    if manifest.kind != kind {
        return Err(Error::Checkpoint(format!(
            "{} holds a {:?} checkpoint, expected {:?}",
            dir.display(),
            manifest.kind,
            kind
        )));
    }
    if manifest.dtype != T::DTYPE {
        return Err(Error::Checkpoint(format!("checkpoint dtype {} does not match {}", manifest.dtype, T::DTYPE)));
    }
    let bytes = fs::read(dir.join(PARAMS_FILE))?;
    let digest = sha256_hex(&bytes);
    if digest != manifest.params_sha256 {
        return Err(Error::Checkpoint(format!(
            "params.bin checksum {digest} does not match manifest {}",
            manifest.params_sha256
        )));
    }
    let params = decode_params::<T>(&bytes)?;
    if params.len() != manifest.num_params {
        return Err(Error::Checkpoint(format!(
            "manifest lists {} parameters, params.bin holds {}",
            manifest.num_params,
            params.len()
        )));
    }
    Ok((params, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest() -> CheckpointManifest {
        CheckpointManifest {
            kind: ModelKind::Classifier,
            dtype: String::new(),
            seed: 1,
            backbone: vec![LayerSpec::conv3(3, 4, 1)],
            head: vec![],
            num_params: 0,
            params_sha256: String::new(),
            normalization: Normalization::default(),
            config: serde_json::json!({}),
            extra: serde_json::Value::Null,
        }
    }

    #[test]
    fn save_load_and_tamper_detection() {
        let dir = tempfile::tempdir().unwrap();
        let params = vec![1.5f32, -2.25, 3.0];
        let m = save(dir.path(), &params, manifest()).unwrap();
        assert_eq!(m.num_params, 3);
        let (back, _) = load::<f32>(dir.path(), ModelKind::Classifier).unwrap();
        assert_eq!(back, params);
        assert!(load::<f32>(dir.path(), ModelKind::Detector).is_err());
        assert!(load::<f64>(dir.path(), ModelKind::Classifier).is_err());

        let mut bytes = fs::read(dir.path().join(PARAMS_FILE)).unwrap();
        bytes[14] ^= 1;
        fs::write(dir.path().join(PARAMS_FILE), bytes).unwrap();
        assert!(matches!(load::<f32>(dir.path(), ModelKind::Classifier), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn decode_rejects_truncation() {
        let mut bytes = encode_params(&[1.0f64, 2.0]);
        bytes.pop();
        assert!(decode_params::<f64>(&bytes).is_err());
        assert!(decode_params::<f64>(b"nope").is_err());
    }
}
