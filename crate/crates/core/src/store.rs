//! Artifact persistence: JSON manifests referencing raw little-endian
//! float32 blobs, each guarded by a SHA-256 content hash.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// Environment variable naming the artifact cache root.
pub const CACHE_ENV: &str = "REENACT_CACHE";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobRef {
    pub file: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub sha256: String,
}

impl BlobRef {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest<M> {
    pub schema_version: u32,
    pub kind: String,
    pub blobs: BTreeMap<String, BlobRef>,
    pub meta: M,
}

impl<M> Manifest<M> {
    pub fn new(kind: &str, meta: M) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            kind: kind.to_string(),
            blobs: BTreeMap::new(),
            meta,
        }
    }

    pub fn blob(&self, name: &str, path: &Path) -> Result<&BlobRef> {
        self.blobs
            .get(name)
            .ok_or_else(|| Error::format(path, format!("manifest lacks blob `{name}`")))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Resolves the cache root from [`CACHE_ENV`], falling back to `default`.
pub fn cache_root(default: impl Into<PathBuf>) -> PathBuf {
    std::env::var_os(CACHE_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| default.into())
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn f32_le_bytes(values: impl IntoIterator<Item = f64>) -> Vec<u8> {
    values
        .into_iter()
        .flat_map(|v| (v as f32).to_le_bytes())
        .collect()
}

/// Writes `values` as little-endian f32 to `dir/<name>.f32`.
pub fn write_blob(
    dir: &Path,
    name: &str,
    values: impl IntoIterator<Item = f64>,
    shape: Vec<usize>,
) -> Result<BlobRef> {
    ensure_dir(dir)?;
    let bytes = f32_le_bytes(values);
    let expected: usize = shape.iter().product();
    if bytes.len() != expected * 4 {
        return Err(Error::ShapeMismatch(format!(
            "blob `{name}` has {} values but shape {shape:?}",
            bytes.len() / 4
        )));
    }
    let file = format!("{name}.f32");
    let path = dir.join(&file);
    fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
    Ok(BlobRef {
        file,
        shape,
        dtype: "f32le".into(),
        sha256: sha256_hex(&bytes),
    })
}

/// Reads a blob back, verifying length and content hash.
pub fn read_blob(dir: &Path, blob: &BlobRef) -> Result<Vec<f32>> {
    let path = dir.join(&blob.file);
    if !path.exists() {
        return Err(Error::MissingArtifact(path));
    }
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    if blob.dtype != "f32le" {
        return Err(Error::format(&path, format!("unsupported dtype {}", blob.dtype)));
    }
    if bytes.len() != blob.len() * 4 {
        return Err(Error::format(
            &path,
            format!("expected {} values, found {}", blob.len(), bytes.len() / 4),
        ));
    }
    if sha256_hex(&bytes) != blob.sha256 {
        return Err(Error::HashMismatch(path));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn read_blob_f64(dir: &Path, blob: &BlobRef) -> Result<Vec<f64>> {
    Ok(read_blob(dir, blob)?.into_iter().map(f64::from).collect())
}

pub fn to_json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)
        .map_err(|e| Error::Config(format!("serialization failed: {e}")))?;
    bytes.push(b'\n');
    Ok(bytes)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            ensure_dir(parent)?;
        }
    }
    let bytes = to_json_bytes(value)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e))
}

/// Reads a manifest and rejects unknown schema versions or kinds.
pub fn read_manifest<M: DeserializeOwned>(path: &Path, kind: &str) -> Result<Manifest<M>> {
    let manifest: Manifest<M> = read_json(path)?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(Error::format(
            path,
            format!("unsupported schema_version {}", manifest.schema_version),
        ));
    }
    if manifest.kind != kind {
        return Err(Error::format(
            path,
            format!("expected a `{kind}` manifest, found `{}`", manifest.kind),
        ));
    }
    Ok(manifest)
}

/// Hash over a manifest's bytes, used to pin derived artifacts to their inputs.
pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}
