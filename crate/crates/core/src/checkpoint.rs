//! Tensor checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  b"CCMIATS1"
//! hlen    u64      length of the JSON header in bytes
//! header  hlen     UTF-8 JSON {"meta": {...}, "tensors": [{"name", "shape"}, ...]}
//! data             f64 values of every tensor, in header order, row-major
//! ```
//!
//! Values are stored as raw IEEE-754 bits, so a reload is bit-exact.

use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::fsio;

const MAGIC: &[u8; 8] = b"CCMIATS1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    meta: Value,
    tensors: Vec<TensorHeader>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: Value,
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    pub fn new(meta: Value) -> Self {
        Checkpoint {
            meta,
            tensors: Vec::new(),
        }
    }

    pub fn push_matrix(&mut self, name: impl Into<String>, m: &Array2<f64>) {
        self.tensors.push(Tensor {
            name: name.into(),
            shape: vec![m.nrows(), m.ncols()],
            data: m.iter().copied().collect(),
        });
    }

    pub fn push_vector(&mut self, name: impl Into<String>, v: &Array1<f64>) {
        self.tensors.push(Tensor {
            name: name.into(),
            shape: vec![v.len()],
            data: v.to_vec(),
        });
    }

    fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("tensor {name:?} not found")))
    }

    pub fn matrix(&self, name: &str) -> Result<Array2<f64>> {
        let t = self.get(name)?;
        match t.shape.as_slice() {
            &[r, c] => Array2::from_shape_vec((r, c), t.data.clone())
                .map_err(|e| Error::Checkpoint(e.to_string())),
            s => Err(Error::Checkpoint(format!("{name:?} has shape {s:?}, expected 2-D"))),
        }
    }

    pub fn vector(&self, name: &str) -> Result<Array1<f64>> {
        let t = self.get(name)?;
        match t.shape.as_slice() {
            &[_] => Ok(Array1::from(t.data.clone())),
            s => Err(Error::Checkpoint(format!("{name:?} has shape {s:?}, expected 1-D"))),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            meta: self.meta.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| TensorHeader {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let total: usize = self.tensors.iter().map(|t| t.data.len()).sum();
        let mut out = Vec::with_capacity(16 + json.len() + 8 * total);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in &self.tensors {
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor {:?} shape {:?} does not match {} values",
                    t.name,
                    t.shape,
                    t.data.len()
                )));
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = bytes
            .get(16..16 + hlen)
            .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
        let header: Header = serde_json::from_slice(body)?;
        let mut offset = 16 + hlen;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for th in header.tensors {
            let count: usize = th.shape.iter().product();
            let end = offset + 8 * count;
            let raw = bytes
                .get(offset..end)
                .ok_or_else(|| Error::Checkpoint(format!("truncated data for {:?}", th.name)))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push(Tensor {
                name: th.name,
                shape: th.shape,
                data,
            });
            offset = end;
        }
        if offset != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Checkpoint {
            meta: header.meta,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsio::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
