//! Checkpoint directory layout:
//!
//! * `manifest.json` lists every tensor (name, shape, dtype, byte offset and
//!   length) plus an opaque `meta` object owned by the caller;
//! * `weights.bin` is the concatenation of all tensors as little-endian floats
//!   in manifest order.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{NumError, ParamStore, Real, Tensor};

pub const CHECKPOINT_VERSION: &str = "fsdm-ckpt-1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "weights.bin";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("malformed checkpoint manifest: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported checkpoint version `{0}` (expected `{CHECKPOINT_VERSION}`)")]
    Version(String),
    #[error("checkpoint dtype `{found}` cannot be loaded as `{expected}`")]
    Dtype { expected: String, found: String },
    #[error("checkpoint blob/manifest mismatch: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Tensor(#[from] NumError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: usize,
    pub nbytes: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    version: String,
    dtype: String,
    total_bytes: usize,
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    meta: serde_json::Value,
}

#[derive(Debug, Clone)]
pub struct Checkpoint<F> {
    pub params: ParamStore<F>,
    pub entries: Vec<TensorEntry>,
    pub meta: serde_json::Value,
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io { path: path.to_path_buf(), source }
}

pub fn save_checkpoint<F: Real>(dir: &Path, params: &ParamStore<F>, meta: serde_json::Value) -> Result<(), CheckpointError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut blob = Vec::with_capacity(params.num_scalars() * F::BYTES);
    let mut tensors = Vec::with_capacity(params.len());
    for (_, name, t) in params.iter() {
        let offset = blob.len();
        t.data().iter().for_each(|&x| x.write_le(&mut blob));
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: F::DTYPE.to_string(),
            offset,
            nbytes: blob.len() - offset,
        });
    }
    let manifest = Manifest {
        version: CHECKPOINT_VERSION.to_string(),
        dtype: F::DTYPE.to_string(),
        total_bytes: blob.len(),
        tensors,
        meta,
    };
    let blob_path = dir.join(BLOB_FILE);
    fs::write(&blob_path, &blob).map_err(io_err(&blob_path))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(&manifest_path, text).map_err(io_err(&manifest_path))?;
    Ok(())
}

pub fn load_checkpoint<F: Real>(dir: &Path) -> Result<Checkpoint<F>, CheckpointError> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version(manifest.version));
    }
    if manifest.dtype != F::DTYPE {
        return Err(CheckpointError::Dtype { expected: F::DTYPE.into(), found: manifest.dtype });
    }
    let blob_path = dir.join(BLOB_FILE);
    let blob = fs::read(&blob_path).map_err(io_err(&blob_path))?;
    if blob.len() != manifest.total_bytes {
        return Err(CheckpointError::Mismatch(format!(
            "manifest declares {} bytes, blob has {}",
            manifest.total_bytes,
            blob.len()
        )));
    }
    let mut params = ParamStore::new();
    for entry in &manifest.tensors {
        if entry.dtype != F::DTYPE {
            return Err(CheckpointError::Dtype { expected: F::DTYPE.into(), found: entry.dtype.clone() });
        }
        let n: usize = entry.shape.iter().product();
        let end = entry.offset.checked_add(entry.nbytes).filter(|&e| e <= blob.len());
        if entry.nbytes != n * F::BYTES || end.is_none() {
            return Err(CheckpointError::Mismatch(format!("tensor `{}` has inconsistent extent", entry.name)));
        }
        let data = blob[entry.offset..entry.offset + entry.nbytes].chunks_exact(F::BYTES).map(F::read_le).collect();
        params.add(entry.name.clone(), Tensor::new(entry.shape.clone(), data)?)?;
    }
    Ok(Checkpoint { params, entries: manifest.tensors, meta: manifest.meta })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.add("a", Tensor::new(vec![2, 2], vec![1.0, -2.0, 3.5, 0.25]).unwrap()).unwrap();
        s.add("b", Tensor::new(vec![3], vec![0.0, 1e-7, -1e7]).unwrap()).unwrap();
        s
    }

    #[test]
    fn round_trips_tensors_and_meta() {
        let dir = tempfile::tempdir().unwrap();
        let meta = serde_json::json!({"hidden_dim": 8});
        save_checkpoint(dir.path(), &store(), meta.clone()).unwrap();
        let ckpt = load_checkpoint::<f32>(dir.path()).unwrap();
        assert_eq!(ckpt.meta, meta);
        assert_eq!(ckpt.entries[1].offset, 16);
        assert_eq!(ckpt.entries[1].nbytes, 12);
        for ((_, n1, t1), (_, n2, t2)) in store().iter().zip(ckpt.params.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            assert_eq!(t1.data(), t2.data());
        }
    }

    #[test]
    fn rejects_dtype_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &store(), serde_json::Value::Null).unwrap();
        assert!(matches!(load_checkpoint::<f64>(dir.path()), Err(CheckpointError::Dtype { .. })));
        let blob = dir.path().join(BLOB_FILE);
        let bytes = fs::read(&blob).unwrap();
        fs::write(&blob, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(load_checkpoint::<f32>(dir.path()), Err(CheckpointError::Mismatch(_))));
    }

    #[test]
    fn rejects_foreign_version() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &store(), serde_json::Value::Null).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).unwrap().replace(CHECKPOINT_VERSION, "other-9");
        fs::write(&path, text).unwrap();
        assert!(matches!(load_checkpoint::<f32>(dir.path()), Err(CheckpointError::Version(_))));
    }
}
