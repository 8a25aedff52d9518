//! Model checkpoint container shared by every learned model.
//!
//! Layout: `b"OVQC"`, format version (u32 LE), header length (u32 LE), a
//! UTF-8 JSON header, then every tensor as f32 LE in header order. The
//! header holds the model kind, an echo of its configuration, the training
//! log, free-form extras (e.g. a vocabulary) and the tensor table.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::autograd::ParamStore;
use crate::error::{Error, Result};
use crate::io::write_bytes;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"OVQC";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    model: String,
    config: Value,
    log: Value,
    extra: Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: String,
    pub config: Value,
    pub log: Value,
    pub extra: Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_params(model: &str, config: Value, log: Value, extra: Value, params: &ParamStore) -> Checkpoint {
        Checkpoint {
            model: model.to_string(),
            config,
            log,
            extra,
            tensors: params.iter().map(|(_, n, t)| (n.to_string(), t.clone())).collect(),
        }
    }

    /// Copies stored tensors into `params`, matching by name and shape.
    pub fn load_into(&self, params: &mut ParamStore) -> Result<()> {
        if self.tensors.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "{} tensors stored, model expects {}",
                self.tensors.len(),
                params.len()
            )));
        }
        for (name, t) in &self.tensors {
            let id = params
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor `{name}`")))?;
            if params.get(id).shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, model expects {:?}",
                    t.shape(),
                    params.get(id).shape()
                )));
            }
            *params.get_mut(id) = t.clone();
        }
        Ok(())
    }

    pub fn expect_model(&self, model: &str) -> Result<()> {
        if self.model != model {
            return Err(Error::Checkpoint(format!(
                "holds a `{}` model, expected `{model}`",
                self.model
            )));
        }
        Ok(())
    }

    pub fn encode(&self) -> Vec<u8> {
        let header = Header {
            model: self.model.clone(),
            config: self.config.clone(),
            log: self.log.clone(),
            extra: self.extra.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| TensorEntry {
                    name: n.clone(),
                    rows: t.rows(),
                    cols: t.cols(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(12 + header.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.tensors {
            for &x in t.data() {
                out.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
        let err = |offset: usize, message: String| Error::Parse {
            context: "checkpoint".into(),
            offset,
            message,
        };
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(err(0, "bad magic, expected OVQC".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(err(4, format!("unsupported version {version}")));
        }
        let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let body = 12 + hlen;
        if bytes.len() < body {
            return Err(err(8, "truncated header".into()));
        }
        let header: Header =
            serde_json::from_slice(&bytes[12..body]).map_err(|e| err(12 + e.column(), e.to_string()))?;
        let mut pos = body;
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for entry in header.tensors {
            let n = entry.rows * entry.cols;
            if bytes.len() - pos < 4 * n {
                return Err(err(pos, format!("truncated tensor `{}`", entry.name)));
            }
            let data = bytes[pos..pos + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect();
            pos += 4 * n;
            tensors.push((entry.name, Tensor::from_vec(entry.rows, entry.cols, data)));
        }
        if pos != bytes.len() {
            return Err(err(pos, format!("{} trailing byte(s)", bytes.len() - pos)));
        }
        Ok(Checkpoint {
            model: header.model,
            config: header.config,
            log: header.log,
            extra: header.extra,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_bytes(path, &self.encode())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::decode(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn round_trip_and_load() {
        let mut s = ParamStore::new();
        s.add("a.w", Tensor::from_vec(2, 2, vec![1.5, -2.0, 0.25, 3.0]));
        s.add("a.b", Tensor::from_vec(1, 2, vec![0.0, 1.0]));
        let ck = Checkpoint::from_params("demo", json!({"k": 1}), json!({"loss": [1.0]}), json!(null), &s);
        let bytes = ck.encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back, ck);
        let mut t = ParamStore::new();
        t.add("a.w", Tensor::zeros(2, 2));
        t.add("a.b", Tensor::zeros(1, 2));
        back.load_into(&mut t).unwrap();
        assert_eq!(t, s);
        let mut trailing = bytes.clone();
        trailing.push(1);
        assert!(Checkpoint::decode(&trailing).is_err());
        assert!(back.expect_model("other").is_err());
    }
}
