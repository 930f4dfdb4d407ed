//! Binary model container shared by the scorer and the reasoner.
//!
//! Layout: the 8-byte magic `ROCKCKPT`, a little-endian `u32` format version,
//! a little-endian `u64` header length, the UTF-8 JSON header (kind, model
//! metadata, vocabulary, tensor names and shapes), then every tensor's values
//! in header order as little-endian `f64`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::nn::{ParamSet, Tensor};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 8] = b"ROCKCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    kind: String,
    meta: Value,
    vocab: Vec<String>,
    tensors: Vec<TensorHeader>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: Value,
    pub vocab: Vec<String>,
    pub tensors: Vec<Tensor<f64>>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            vocab: self.vocab.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| TensorHeader {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let n_values: usize = self.tensors.iter().map(|t| t.data.len()).sum();
        let mut out = Vec::with_capacity(20 + header.len() + 8 * n_values);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body_start = 20usize
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[20..body_start])
            .map_err(|e| bad(format!("invalid header: {e}")))?;
        let mut body = &bytes[body_start..];
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for th in header.tensors {
            let len: usize = th.shape.iter().product();
            if body.len() < 8 * len {
                return Err(bad(format!("truncated data for tensor `{}`", th.name)));
            }
            let data = body[..8 * len]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            body = &body[8 * len..];
            tensors.push(Tensor {
                name: th.name,
                shape: th.shape,
                data,
            });
        }
        if !body.is_empty() {
            return Err(bad(format!("{} trailing bytes after tensor data", body.len())));
        }
        Ok(Self {
            kind: header.kind,
            meta: header.meta,
            vocab: header.vocab,
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.is_file() {
            return Err(bad(format!("checkpoint not found: {}", path.display())));
        }
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(bad(format!("expected a `{kind}` checkpoint, found `{}`", self.kind)))
        }
    }

    /// Removes the next tensors matching `names`, in order, converting to `T`.
    pub(crate) fn take_params<T: Scalar>(
        tensors: &mut std::vec::IntoIter<Tensor<f64>>,
        names: &[&str],
    ) -> Result<ParamSet<T>> {
        let mut out = Vec::with_capacity(names.len());
        for name in names {
            let t = tensors
                .next()
                .ok_or_else(|| bad(format!("missing tensor `{name}`")))?;
            if t.name != *name {
                return Err(bad(format!("expected tensor `{name}`, found `{}`", t.name)));
            }
            out.push(Tensor {
                name: t.name,
                shape: t.shape,
                data: t.data.into_iter().map(T::from_f64_lossy).collect(),
            });
        }
        Ok(ParamSet::new(out))
    }
}

pub(crate) fn params_to_f64<T: Scalar>(params: &ParamSet<T>) -> impl Iterator<Item = Tensor<f64>> + '_ {
    params.tensors.iter().map(|t| Tensor {
        name: t.name.clone(),
        shape: t.shape.clone(),
        data: t.data.iter().map(|v| v.to_f64_lossy()).collect(),
    })
}

pub(crate) fn meta_usize(meta: &Value, key: &str) -> Result<usize> {
    meta.get(key)
        .and_then(Value::as_u64)
        .map(|v| v as usize)
        .ok_or_else(|| bad(format!("header meta lacks integer `{key}`")))
}
