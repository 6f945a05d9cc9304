//! Binary checkpoint container.
//!
//! Layout: the 6-byte magic `PDPHA1`, a little-endian `u32` header length,
//! a UTF-8 JSON header, then every tensor's values as little-endian `f64`
//! in header order. The header is an object with a free-form `"meta"` value
//! and a `"tensors"` array of `{"name", "shape"}` entries.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde_json::{json, Value};

use crate::error::{NnError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 6] = b"PDPHA1";

/// Decoded checkpoint contents.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: Value,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_store(meta: Value, store: &ParamStore) -> Self {
        let tensors = store
            .iter()
            .map(|(_, p)| (p.name().to_string(), p.value().clone()))
            .collect();
        Self { meta, tensors }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let directory: Vec<Value> = self
            .tensors
            .iter()
            .map(|(name, t)| json!({ "name": name, "shape": t.shape() }))
            .collect();
        let header = serde_json::to_vec(&json!({ "meta": self.meta, "tensors": directory }))?;
        let header_len = u32::try_from(header.len()).map_err(|_| NnError::Checkpoint("header too large".into()))?;
        let payload: usize = self.tensors.iter().map(|(_, t)| t.numel() * 8).sum();
        let mut out = Vec::with_capacity(MAGIC.len() + 4 + header.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&header_len.to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| NnError::Checkpoint(msg.to_string());
        if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(bad("missing PDPHA1 magic"));
        }
        let mut len_bytes = [0u8; 4];
        len_bytes.copy_from_slice(&bytes[6..10]);
        let header_len = u32::from_le_bytes(len_bytes) as usize;
        let header_end = 10 + header_len;
        if bytes.len() < header_end {
            return Err(bad("truncated header"));
        }
        let header: Value = serde_json::from_slice(&bytes[10..header_end])?;
        let directory = header
            .get("tensors")
            .and_then(Value::as_array)
            .ok_or_else(|| bad("header lacks a tensor directory"))?;
        let mut offset = header_end;
        let mut tensors = Vec::with_capacity(directory.len());
        for entry in directory {
            let name = entry
                .get("name")
                .and_then(Value::as_str)
                .ok_or_else(|| bad("tensor entry without a name"))?;
            let shape: Vec<usize> = serde_json::from_value(entry.get("shape").cloned().unwrap_or(Value::Null))
                .map_err(|_| NnError::Checkpoint(format!("tensor `{name}` has an invalid shape")))?;
            let numel: usize = shape.iter().product();
            let end = offset + numel * 8;
            if bytes.len() < end {
                return Err(NnError::Checkpoint(format!("payload of `{name}` is truncated")));
            }
            let data = bytes[offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((name.to_string(), Tensor::new(shape, data)?));
            offset = end;
        }
        if offset != bytes.len() {
            return Err(bad("trailing bytes after payload"));
        }
        Ok(Self {
            meta: header.get("meta").cloned().unwrap_or(Value::Null),
            tensors,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut file = fs::File::create(path)?;
        file.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Copies tensors into `store` by name. Every parameter of the store must
    /// be present with an identical shape; the error names the offender.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.name().to_string())).collect();
        for (id, name) in ids {
            let t = self
                .tensor(&name)
                .ok_or_else(|| NnError::Checkpoint(format!("tensor `{name}` missing from checkpoint")))?;
            let param = store.get_mut(id);
            if t.shape() != param.value().shape() {
                return Err(NnError::Checkpoint(format!(
                    "tensor `{name}` has shape {:?} in checkpoint but the model expects {:?}",
                    t.shape(),
                    param.value().shape()
                )));
            }
            param.value_mut().clone_from(t);
        }
        if self.tensors.len() != store.len() {
            let extra = self
                .tensors
                .iter()
                .find(|(n, _)| store.id(n).is_none())
                .map(|(n, _)| n.as_str())
                .unwrap_or("?");
            return Err(NnError::Checkpoint(format!("checkpoint tensor `{extra}` is not part of the model")));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("a", Tensor::new(vec![2, 2], vec![1.0, -0.5, f64::MIN_POSITIVE, 3.25]).unwrap())
            .unwrap();
        s.add("b", Tensor::vector(vec![0.1, 0.2, 0.3])).unwrap();
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let src = store();
        let ck = Checkpoint::from_store(json!({"d_h": 2}), &src);
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back.meta, json!({"d_h": 2}));
        let mut dst = store();
        for p in dst.params_mut() {
            p.value_mut().fill(0.0);
        }
        back.restore_into(&mut dst).unwrap();
        for ((_, a), (_, b)) in src.iter().zip(dst.iter()) {
            assert_eq!(a.value(), b.value());
        }
    }

    #[test]
    fn starts_with_magic() {
        let bytes = Checkpoint::from_store(Value::Null, &store()).to_bytes().unwrap();
        assert_eq!(&bytes[..6], b"PDPHA1");
    }

    #[test]
    fn shape_mismatch_names_tensor() {
        let ck = Checkpoint::from_store(Value::Null, &store());
        let mut other = ParamStore::new();
        other.add("a", Tensor::zeros(&[2, 2])).unwrap();
        other.add("b", Tensor::zeros(&[4])).unwrap();
        let err = ck.restore_into(&mut other).unwrap_err().to_string();
        assert!(err.contains("`b`"), "{err}");
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut bytes = Checkpoint::from_store(Value::Null, &store()).to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        bytes[0] = b'X';
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }
}
