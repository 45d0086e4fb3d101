//! On-disk checkpoint container.
//!
//! A checkpoint is a directory holding `manifest.json` (kind, version,
//! hyperparameters, tensor table) and one raw little-endian `f32` blob per
//! named tensor, row-major.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: String,
    pub version: u32,
    pub hyperparameters: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_hash: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(kind: &str, hyperparameters: serde_json::Value) -> Self {
        Self {
            manifest: Manifest {
                kind: kind.into(),
                version: FORMAT_VERSION,
                hyperparameters,
                tensors: Vec::new(),
                base_hash: None,
            },
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, data: &[f64]) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.insert(name.into(), Tensor { shape, data: data.to_vec() });
    }

    /// Fetch a tensor and check its shape.
    pub fn take(&mut self, name: &str, shape: &[usize]) -> Result<Vec<f64>> {
        let t = self
            .tensors
            .remove(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        if t.shape != shape {
            return Err(Error::Checkpoint(format!("tensor {name} has shape {:?}, expected {shape:?}", t.shape)));
        }
        Ok(t.data)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.manifest.kind != kind {
            return Err(Error::Checkpoint(format!("expected a {kind} checkpoint, found {}", self.manifest.kind)));
        }
        if self.manifest.version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {}", self.manifest.version)));
        }
        Ok(())
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut manifest = self.manifest.clone();
        manifest.tensors.clear();
        for (name, t) in &self.tensors {
            let file = format!("{name}.f32");
            let mut bytes = Vec::with_capacity(t.data.len() * 4);
            for &v in &t.data {
                bytes.extend_from_slice(&(v as f32).to_le_bytes());
            }
            std::fs::write(dir.join(&file), bytes)?;
            manifest.tensors.push(TensorEntry { name: name.clone(), shape: t.shape.clone(), file });
        }
        std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("manifest.json");
        if !path.exists() {
            return Err(Error::MissingFile(path.display().to_string()));
        }
        let manifest: Manifest = serde_json::from_slice(&std::fs::read(&path)?)?;
        let mut tensors = BTreeMap::new();
        for e in &manifest.tensors {
            let bytes = std::fs::read(dir.join(&e.file))?;
            let n: usize = e.shape.iter().product();
            if bytes.len() != 4 * n {
                return Err(Error::Checkpoint(format!(
                    "tensor {} holds {} bytes, shape {:?} needs {}",
                    e.name,
                    bytes.len(),
                    e.shape,
                    4 * n
                )));
            }
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            tensors.insert(e.name.clone(), Tensor { shape: e.shape.clone(), data });
        }
        Ok(Self { manifest, tensors })
    }
}

/// Round every value to the nearest `f32`, the precision checkpoints store.
pub fn round_to_f32(data: &mut [f64]) {
    data.iter_mut().for_each(|v| *v = *v as f32 as f64);
}

/// SHA-256 over named `f64` tensors, in the order given.
pub fn hash_tensors<'a>(tensors: impl IntoIterator<Item = (String, &'a [f64])>) -> String {
    let mut h = Sha256::new();
    for (name, data) in tensors {
        h.update(name.as_bytes());
        h.update((data.len() as u64).to_le_bytes());
        for v in data {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
