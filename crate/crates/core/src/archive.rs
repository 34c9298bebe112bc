//! Flat tensor archives: a JSON manifest naming each tensor's shape, dtype
//! and byte offset, next to a binary blob of little-endian floats.
//!
//! ```text
//! model.json   {"format": "geodiff-tensors", "version": 1, "data": "model.bin",
//!               "meta": {...}, "tensors": [{"name", "shape", "dtype", "offset"}]}
//! model.bin    raw bytes
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

pub const FORMAT: &str = "geodiff-tensors";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub dtype: Dtype,
    /// Byte offset into the data file.
    pub offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    /// Data file name, relative to the manifest.
    pub data: String,
    #[serde(default)]
    pub meta: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

/// An ordered set of named matrices plus free-form metadata.
#[derive(Clone, Debug, Default)]
pub struct TensorArchive {
    pub meta: serde_json::Value,
    tensors: Vec<(String, Dtype, Matrix)>,
}

impl TensorArchive {
    pub fn new(meta: serde_json::Value) -> Self {
        Self {
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, dtype: Dtype, m: Matrix) {
        self.tensors.push((name.into(), dtype, m));
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.tensors.iter().find(|(n, ..)| n == name).map(|(_, _, m)| m)
    }

    pub fn take(&mut self, name: &str) -> Result<Matrix> {
        let i = self
            .tensors
            .iter()
            .position(|(n, ..)| n == name)
            .ok_or_else(|| Error::Missing(format!("tensor `{name}`")))?;
        Ok(self.tensors.remove(i).2)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, ..)| n.as_str())
    }

    /// Serializes to `(manifest, data)` with the given data file name.
    pub fn encode(&self, data_name: &str) -> (Manifest, Vec<u8>) {
        let mut bytes = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, dtype, m) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: [m.rows(), m.cols()],
                dtype: *dtype,
                offset: bytes.len(),
            });
            for &v in m.data() {
                match dtype {
                    Dtype::F32 => bytes.extend_from_slice(&(v as f32).to_le_bytes()),
                    Dtype::F64 => bytes.extend_from_slice(&v.to_le_bytes()),
                }
            }
        }
        let manifest = Manifest {
            format: FORMAT.into(),
            version: VERSION,
            data: data_name.into(),
            meta: self.meta.clone(),
            tensors: entries,
        };
        (manifest, bytes)
    }

    pub fn decode(manifest: Manifest, bytes: &[u8]) -> Result<Self> {
        if manifest.format != FORMAT || manifest.version != VERSION {
            return Err(Error::Format(format!(
                "unsupported archive {} v{}",
                manifest.format, manifest.version
            )));
        }
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in manifest.tensors {
            let n = e.shape[0] * e.shape[1];
            let end = e.offset + n * e.dtype.size();
            let raw = bytes.get(e.offset..end).ok_or_else(|| {
                Error::Format(format!("tensor `{}` runs past the end of the data", e.name))
            })?;
            let data: Vec<f64> = match e.dtype {
                Dtype::F32 => raw
                    .chunks_exact(4)
                    .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
                    .collect(),
                Dtype::F64 => raw
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
                    .collect(),
            };
            tensors.push((e.name, e.dtype, Matrix::from_vec(e.shape[0], e.shape[1], data)?));
        }
        Ok(Self {
            meta: manifest.meta,
            tensors,
        })
    }

    /// Writes `<path>` (manifest) and `<path stem>.bin` next to it.
    pub fn save(&self, manifest_path: impl AsRef<Path>) -> Result<()> {
        let path = manifest_path.as_ref();
        let data_path = data_path_for(path);
        let data_name = data_path
            .file_name()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::invalid("bad archive path"))?
            .to_owned();
        let (manifest, bytes) = self.encode(&data_name);
        std::fs::write(&data_path, bytes)?;
        std::fs::write(path, serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Self> {
        let path = manifest_path.as_ref();
        let manifest: Manifest = serde_json::from_slice(&std::fs::read(path)?)?;
        let data_path = path.parent().unwrap_or(Path::new(".")).join(&manifest.data);
        let bytes = std::fs::read(data_path)?;
        Self::decode(manifest, &bytes)
    }
}

fn data_path_for(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}
