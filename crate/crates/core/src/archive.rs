//! Directory-based tensor archives.
//!
//! An archive is a directory holding `manifest.json` and one little-endian, row-major
//! `f32` blob. The manifest maps each tensor name to its dtype, shape, blob file and
//! byte offset. Files are written to a temporary name and renamed into place, the
//! manifest last, so a reader never sees a half-written archive.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, ArrayViewD, ArrayViewMutD, IxDyn};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST: &str = "manifest.json";
const BLOB: &str = "tensors.bin";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub file: String,
    pub byte_offset: u64,
}

/// In-memory set of named `f32` tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorArchive {
    tensors: BTreeMap<String, ArrayD<f32>>,
}

impl TensorArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: ArrayD<f32>) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&ArrayD<f32>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Archive(format!("missing tensor `{name}`")))
    }

    pub fn take(&mut self, name: &str) -> Result<ArrayD<f32>> {
        self.tensors
            .remove(name)
            .ok_or_else(|| Error::Archive(format!("missing tensor `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Archive holding copies of the named views.
    pub fn from_views<'a>(items: impl IntoIterator<Item = (String, ArrayViewD<'a, f32>)>) -> Self {
        Self {
            tensors: items.into_iter().map(|(n, v)| (n, v.to_owned())).collect(),
        }
    }

    /// Copies stored tensors into the named destinations; every destination must be
    /// present with a matching shape.
    pub fn fill_views(&self, items: Vec<(String, ArrayViewMutD<'_, f32>)>) -> Result<()> {
        for (name, mut dst) in items {
            let src = self.get(&name)?;
            if src.shape() != dst.shape() {
                return Err(Error::Archive(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    src.shape(),
                    dst.shape()
                )));
            }
            dst.assign(src);
        }
        Ok(())
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut blob = Vec::new();
        let mut manifest = BTreeMap::new();
        for (name, t) in &self.tensors {
            manifest.insert(
                name.clone(),
                ManifestEntry {
                    dtype: "f32".into(),
                    shape: t.shape().to_vec(),
                    file: BLOB.into(),
                    byte_offset: blob.len() as u64,
                },
            );
            blob.reserve(t.len() * 4);
            for v in t.iter() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        write_atomic(&dir.join(BLOB), &blob)?;
        write_atomic(&dir.join(MANIFEST), &serde_json::to_vec_pretty(&manifest)?)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST);
        let text = fs::read(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: BTreeMap<String, ManifestEntry> = serde_json::from_slice(&text)?;
        let mut blobs: BTreeMap<String, Vec<u8>> = BTreeMap::new();
        let mut tensors = BTreeMap::new();
        for (name, entry) in manifest {
            if entry.dtype != "f32" {
                return Err(Error::Archive(format!(
                    "tensor `{name}` has unsupported dtype {}",
                    entry.dtype
                )));
            }
            if !blobs.contains_key(&entry.file) {
                let path = dir.join(&entry.file);
                let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
                blobs.insert(entry.file.clone(), bytes);
            }
            let bytes = &blobs[&entry.file];
            let count: usize = entry.shape.iter().product();
            let start = entry.byte_offset as usize;
            let end = start + count * 4;
            if end > bytes.len() {
                return Err(Error::Archive(format!(
                    "tensor `{name}` overruns {} ({end} > {} bytes)",
                    entry.file,
                    bytes.len()
                )));
            }
            let data: Vec<f32> = bytes[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = ArrayD::from_shape_vec(IxDyn(&entry.shape), data)
                .map_err(|e| Error::Archive(format!("tensor `{name}`: {e}")))?;
            tensors.insert(name, t);
        }
        Ok(Self { tensors })
    }
}

/// Writes `bytes` to `path` through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = tmp_path(path);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(format!(".tmp{}", std::process::id()));
    path.with_file_name(name)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_vec_pretty(value)?;
    text.push(b'\n');
    write_atomic(path, &text)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&text)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_bits() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = TensorArchive::new();
        a.insert("x", ArrayD::from_shape_fn(IxDyn(&[2, 3]), |i| (i[0] * 3 + i[1]) as f32 * 0.1));
        a.insert("scalarish", ArrayD::from_elem(IxDyn(&[1]), f32::MIN_POSITIVE));
        a.write(dir.path()).unwrap();
        let b = TensorArchive::read(dir.path()).unwrap();
        assert_eq!(a, b);

        let manifest: BTreeMap<String, ManifestEntry> = read_json(&dir.path().join(MANIFEST)).unwrap();
        assert_eq!(manifest["scalarish"].byte_offset, 0);
        assert_eq!(manifest["x"].byte_offset, 4);
        assert_eq!(manifest["x"].shape, vec![2, 3]);
        let blob = fs::read(dir.path().join(BLOB)).unwrap();
        assert_eq!(&blob[8..12], &0.1f32.to_le_bytes());
    }

    #[test]
    fn truncated_blob_is_an_archive_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = TensorArchive::new();
        a.insert("x", ArrayD::zeros(IxDyn(&[4])));
        a.write(dir.path()).unwrap();
        fs::write(dir.path().join(BLOB), [0u8; 8]).unwrap();
        assert!(matches!(TensorArchive::read(dir.path()), Err(Error::Archive(_))));
    }

    #[test]
    fn missing_dir_reports_path() {
        let err = TensorArchive::read(Path::new("/nonexistent/archive")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/archive"));
    }
}
