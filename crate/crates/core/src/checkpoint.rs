//! Checkpoint directories: `manifest.json` plus a raw little-endian f32 blob.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use autograd::Tensor;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};

pub const FORMAT: &str = "dualgan-checkpoint";
pub const VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
pub const BLOB: &str = "weights.bin";

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    /// Byte offset into the blob.
    offset: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    step: u64,
    config: String,
    #[serde(default)]
    scalars: BTreeMap<String, f64>,
    #[serde(default)]
    meta: BTreeMap<String, String>,
    tensors: Vec<TensorEntry>,
    blob_bytes: u64,
}

/// Order-sensitive digest of named tensors (names, shapes and exact bits).
pub fn digest<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<f32>)>) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    let mut eat = |x: u64| {
        for b in x.to_le_bytes() {
            h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
        }
    };
    for (name, t) in tensors {
        name.bytes().for_each(|b| eat(b as u64));
        t.shape().iter().for_each(|&d| eat(d as u64));
        t.data().iter().for_each(|v| eat(v.to_bits() as u64));
    }
    h
}

/// Named tensors with their training step and the config that produced them.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub step: u64,
    pub config: ModelConfig,
    pub tensors: Vec<(String, Tensor<f32>)>,
    /// Scalar training state (e.g. running means).
    pub scalars: BTreeMap<String, f64>,
    /// Free-form string metadata.
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(step: u64, config: ModelConfig) -> Self {
        Self {
            step,
            config,
            tensors: Vec::new(),
            scalars: BTreeMap::new(),
            meta: BTreeMap::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.tensors.push((name.into(), t));
    }

    pub fn extend(&mut self, items: impl IntoIterator<Item = (String, Tensor<f32>)>) {
        self.tensors.extend(items);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Tensors whose name starts with `prefix`, with the prefix stripped.
    pub fn with_prefix(&self, prefix: &str) -> Vec<(String, Tensor<f32>)> {
        self.tensors
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(prefix).map(|s| (s.to_string(), t.clone())))
            .collect()
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut blob = Vec::new();
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype: "f32".into(),
                offset: blob.len() as u64,
            });
            for v in t.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = Manifest {
            format: FORMAT.into(),
            version: VERSION,
            step: self.step,
            config: self.config.to_text(),
            scalars: self.scalars.clone(),
            meta: self.meta.clone(),
            tensors: entries,
            blob_bytes: blob.len() as u64,
        };
        // Write the blob first so a manifest never points at a missing payload.
        let tmp = dir.join(format!("{BLOB}.tmp"));
        fs::write(&tmp, &blob)?;
        fs::rename(&tmp, dir.join(BLOB))?;
        let tmp = dir.join(format!("{MANIFEST}.tmp"));
        fs::write(&tmp, serde_json::to_string_pretty(&manifest)?)?;
        fs::rename(&tmp, dir.join(MANIFEST))?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let err = |msg: String| Error::Checkpoint {
            path: PathBuf::from(dir),
            msg,
        };
        let text = fs::read_to_string(dir.join(MANIFEST)).map_err(|e| err(format!("cannot read {MANIFEST}: {e}")))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| err(format!("bad manifest: {e}")))?;
        if manifest.format != FORMAT {
            return Err(err(format!("unknown format `{}`", manifest.format)));
        }
        if manifest.version != VERSION {
            return Err(err(format!("unknown format version {}", manifest.version)));
        }
        let blob = fs::read(dir.join(BLOB)).map_err(|e| err(format!("cannot read {BLOB}: {e}")))?;
        if blob.len() as u64 != manifest.blob_bytes {
            return Err(err(format!(
                "size mismatch: manifest expects {} blob bytes, found {}",
                manifest.blob_bytes,
                blob.len()
            )));
        }
        let config = ModelConfig::parse(&manifest.config)?;
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in &manifest.tensors {
            if e.dtype != "f32" {
                return Err(err(format!("tensor {}: unsupported dtype {}", e.name, e.dtype)));
            }
            let count: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start
                .checked_add(count * 4)
                .filter(|&end| end <= blob.len())
                .ok_or_else(|| err(format!("size mismatch: tensor {} extends past the blob", e.name)))?;
            let data = blob[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push((e.name.clone(), Tensor::new(&e.shape, data)));
        }
        Ok(Self {
            step: manifest.step,
            config,
            tensors,
            scalars: manifest.scalars,
            meta: manifest.meta,
        })
    }
}
