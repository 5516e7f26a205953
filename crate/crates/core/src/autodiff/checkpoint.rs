//! Parameter checkpoints shared by every trained model.
//!
//! Layout: magic `VOXCKPT1`, a little-endian `u64` header length, a JSON
//! header `{schema_version, tensors: [{name, shape, offset}], config}` and
//! then the concatenated f32 little-endian payload. `offset` counts floats.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"VOXCKPT1";
pub const CHECKPOINT_SCHEMA: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    tensors: Vec<Entry>,
    config: serde_json::Value,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub config: serde_json::Value,
    tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn new(config: serde_json::Value) -> Self {
        Checkpoint {
            config,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|(n, _)| n.as_str())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0;
        let mut entries = Vec::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            entries.push(Entry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            });
            offset += t.len();
        }
        let header = serde_json::to_vec(&Header {
            schema_version: CHECKPOINT_SCHEMA,
            tensors: entries,
            config: self.config.clone(),
        })?;
        let mut out = Vec::with_capacity(16 + header.len() + offset * 4);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.tensors {
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::Truncated {
                expected: 16,
                found: bytes.len(),
            });
        }
        if &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or(Error::Truncated {
                expected: 16usize.saturating_add(hlen),
                found: bytes.len(),
            })?;
        let header: Header = serde_json::from_slice(&bytes[16..body])?;
        if header.schema_version != CHECKPOINT_SCHEMA {
            return Err(Error::Format(format!(
                "checkpoint schema {} unsupported",
                header.schema_version
            )));
        }
        let payload = &bytes[body..];
        let mut seen = HashMap::new();
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let (start, end) = (e.offset * 4, (e.offset + n) * 4);
            if end > payload.len() {
                return Err(Error::Truncated {
                    expected: body + end,
                    found: bytes.len(),
                });
            }
            let data = payload[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if seen.insert(e.name.clone(), ()).is_some() {
                return Err(Error::Format(format!("duplicate tensor {}", e.name)));
            }
            tensors.push((e.name, Tensor::new(&e.shape, data)?));
        }
        Ok(Checkpoint {
            config: header.config,
            tensors,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let mut c = Checkpoint::new(serde_json::json!({"k": 3}));
        c.push("a", Tensor::new(&[2, 2], vec![1.0, -2.5, 3.25, f32::MIN_POSITIVE]).unwrap());
        c.push("b", Tensor::scalar(7.0));
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn rejects_truncation() {
        let mut c = Checkpoint::new(serde_json::Value::Null);
        c.push("a", Tensor::zeros(&[10]));
        let bytes = c.to_bytes().unwrap();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 1]),
            Err(Error::Truncated { .. })
        ));
    }
}
