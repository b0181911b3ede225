//! Binary checkpoints: an 8-byte magic, a little-endian `u64` manifest
//! length, the JSON manifest, then every tensor as little-endian `f64`.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Architecture, CSNet, CSNetConfig, TensorMap};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"CSNETCKP";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    Param,
    Buffer,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub kind: TensorKind,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset from the start of the data section.
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub config: CSNetConfig,
    pub arch: Architecture,
    pub tensors: Vec<TensorEntry>,
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

impl CSNet {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut data = Vec::new();
        let groups: [(TensorKind, &TensorMap); 2] = [(TensorKind::Param, &self.params), (TensorKind::Buffer, &self.buffers)];
        for (kind, map) in groups {
            for (name, t) in map {
                tensors.push(TensorEntry {
                    name: name.clone(),
                    kind,
                    shape: t.shape().to_vec(),
                    dtype: "f64".into(),
                    offset: data.len() as u64,
                });
                for v in t.data() {
                    data.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let manifest = Manifest {
            version: VERSION,
            config: self.config.clone(),
            arch: self.arch.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(16 + json.len() + data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&data);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let manifest = read_manifest(bytes)?;
        let start = 16 + manifest_len(bytes)?;
        let data = &bytes[start..];
        let mut params = TensorMap::new();
        let mut buffers = TensorMap::new();
        for e in &manifest.tensors {
            if e.dtype != "f64" {
                return Err(format_err(format!("tensor {} has unsupported dtype {}", e.name, e.dtype)));
            }
            let n: usize = e.shape.iter().product();
            let lo = e.offset as usize;
            let hi = lo + 8 * n;
            if hi > data.len() {
                return Err(format_err(format!("tensor {} runs past the end of the file", e.name)));
            }
            let values = data[lo..hi]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(e.shape.clone(), values)?;
            let map = match e.kind {
                TensorKind::Param => &mut params,
                TensorKind::Buffer => &mut buffers,
            };
            if map.insert(e.name.clone(), t).is_some() {
                return Err(format_err(format!("duplicate tensor {}", e.name)));
            }
        }
        let model = CSNet {
            config: manifest.config,
            arch: manifest.arch,
            params,
            buffers,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

fn manifest_len(bytes: &[u8]) -> Result<usize> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(format_err("not a checkpoint (bad magic)"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    if 16 + len > bytes.len() {
        return Err(format_err("truncated manifest"));
    }
    Ok(len)
}

/// Parses only the manifest of a checkpoint.
pub fn read_manifest(bytes: &[u8]) -> Result<Manifest> {
    let len = manifest_len(bytes)?;
    let manifest: Manifest = serde_json::from_slice(&bytes[16..16 + len])?;
    if manifest.version != VERSION {
        return Err(format_err(format!("unsupported checkpoint version {}", manifest.version)));
    }
    Ok(manifest)
}
