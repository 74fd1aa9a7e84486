//! On-disk bundle format: a JSON manifest next to a raw little-endian
//! float32 blob. The manifest lists `(name, shape, byte offset)` for every
//! tensor and carries the tool version, a config hash and the seed.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const FORMAT: &str = "jointdiff-bundle/1";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub kind: String,
    pub tool_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub header: Value,
    pub tensors: Vec<TensorRecord>,
    pub blob: String,
    pub blob_sha256: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            name: name.into(),
            shape,
            data,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Bundle {
    pub manifest: Manifest,
    pub tensors: Vec<Tensor>,
}

impl Bundle {
    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Input(format!("bundle has no tensor named `{name}`")))
    }
}

/// Short hex digest of the canonical JSON encoding of `value`.
pub fn config_hash<T: Serialize + ?Sized>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config serializes");
    hex::encode(&Sha256::digest(&bytes)[..8])
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn blob_path(manifest_path: &Path) -> PathBuf {
    manifest_path.with_extension("bin")
}

/// Encodes tensors as little-endian f32; returns the blob and the records.
pub fn encode_tensors(tensors: &[Tensor]) -> (Vec<u8>, Vec<TensorRecord>) {
    let total: usize = tensors.iter().map(|t| t.data.len()).sum();
    let mut blob = Vec::with_capacity(total * 4);
    let mut records = Vec::with_capacity(tensors.len());
    for t in tensors {
        records.push(TensorRecord {
            name: t.name.clone(),
            shape: t.shape.clone(),
            offset: blob.len() as u64,
        });
        for &v in &t.data {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    (blob, records)
}

pub fn write_bundle(
    path: &Path,
    kind: &str,
    seed: u64,
    config_hash: String,
    header: Value,
    tensors: &[Tensor],
) -> Result<Manifest> {
    let (blob, records) = encode_tensors(tensors);
    let bin = blob_path(path);
    let manifest = Manifest {
        format: FORMAT.to_string(),
        kind: kind.to_string(),
        tool_version: TOOL_VERSION.to_string(),
        config_hash,
        seed,
        header,
        tensors: records,
        blob: bin
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        blob_sha256: sha256_hex(&blob),
    };
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(&bin, &blob)?;
    fs::write(path, serde_json::to_vec_pretty(&manifest)?)?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Usage(format!("cannot read `{}`: {e}", path.display())))?;
    let manifest: Manifest = serde_json::from_slice(&bytes)?;
    if manifest.format != FORMAT {
        return Err(Error::Input(format!(
            "`{}` has format `{}`, expected `{FORMAT}`",
            path.display(),
            manifest.format
        )));
    }
    Ok(manifest)
}

pub fn read_bundle(path: &Path) -> Result<Bundle> {
    let manifest = read_manifest(path)?;
    let bin = path.with_file_name(&manifest.blob);
    let blob = fs::read(&bin)
        .map_err(|e| Error::Usage(format!("cannot read blob `{}`: {e}", bin.display())))?;
    if sha256_hex(&blob) != manifest.blob_sha256 {
        return Err(Error::Input(format!(
            "blob `{}` does not match its manifest digest",
            bin.display()
        )));
    }
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for rec in &manifest.tensors {
        let len: usize = rec.shape.iter().product();
        let start = rec.offset as usize;
        let end = start + len * 4;
        if end > blob.len() {
            return Err(Error::Input(format!(
                "tensor `{}` overruns the blob ({end} > {})",
                rec.name,
                blob.len()
            )));
        }
        let data = blob[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        tensors.push(Tensor::new(rec.name.clone(), rec.shape.clone(), data));
    }
    Ok(Bundle { manifest, tensors })
}

/// Rounds every value through f32, matching what a write/read cycle yields.
pub fn round_f32(data: &mut [f64]) {
    for v in data {
        *v = *v as f32 as f64;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundle_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.json");
        let tensors = vec![
            Tensor::new("a", vec![2, 3], vec![0.1, -2.5, 3.0, 1e-7, 0.0, -0.0]),
            Tensor::new("b", vec![1], vec![42.0]),
        ];
        write_bundle(&path, "test", 9, "abc".into(), Value::Null, &tensors).unwrap();
        let first = fs::read(blob_path(&path)).unwrap();
        let loaded = read_bundle(&path).unwrap();
        assert_eq!(loaded.manifest.seed, 9);
        assert_eq!(loaded.tensors[0].shape, vec![2, 3]);
        assert_eq!(loaded.tensors[1].data, vec![42.0]);
        assert_eq!(loaded.manifest.tensors[1].offset, 24);
        let path2 = dir.path().join("u.json");
        write_bundle(&path2, "test", 9, "abc".into(), Value::Null, &loaded.tensors).unwrap();
        assert_eq!(first, fs::read(blob_path(&path2)).unwrap());
    }

    #[test]
    fn corrupted_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.json");
        let tensors = vec![Tensor::new("a", vec![2], vec![1.0, 2.0])];
        write_bundle(&path, "test", 0, "x".into(), Value::Null, &tensors).unwrap();
        let mut bytes = fs::read(blob_path(&path)).unwrap();
        bytes[0] ^= 1;
        fs::write(blob_path(&path), bytes).unwrap();
        assert!(matches!(read_bundle(&path), Err(Error::Input(_))));
    }
}
