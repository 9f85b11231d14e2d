use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};
use crate::binio::{self, Reader};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SEMM";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    kind: String,
    config: serde_json::Value,
    params: Vec<ParamEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: [usize; 2],
}

/// Named f32 parameter buffers plus the model kind and its config.
///
/// Layout: magic, u16 version, u32 header length, JSON header, then the
/// buffers in header order.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: String,
    pub config: serde_json::Value,
    pub params: Vec<(String, [usize; 2], Vec<f32>)>,
}

impl Checkpoint {
    pub fn from_store(kind: &str, config: serde_json::Value, store: &ParamStore) -> Self {
        let params = store
            .ids()
            .map(|id| {
                let t = store.get(id);
                (store.name(id).to_string(), t.shape(), t.data().iter().map(|&v| v as f32).collect())
            })
            .collect();
        Checkpoint { kind: kind.to_string(), config, params }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            kind: self.kind.clone(),
            config: self.config.clone(),
            params: self.params.iter().map(|(name, shape, _)| ParamEntry { name: name.clone(), shape: *shape }).collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(10 + json.len() + self.params.iter().map(|p| 4 * p.2.len()).sum::<usize>());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, _, data) in &self.params {
            binio::put_f32s(&mut out, data.iter().copied());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(CHECKPOINT_MAGIC)?;
        r.version(CHECKPOINT_VERSION)?;
        let len = r.u32("header length")? as usize;
        let start = r.offset();
        let json = r.take(len, "header")?;
        let header: Header =
            serde_json::from_slice(json).map_err(|e| Error::parse(start, format!("bad header: {e}")))?;
        let mut names = std::collections::HashSet::new();
        let mut params = Vec::with_capacity(header.params.len().min(4096));
        for p in header.params {
            if !names.insert(p.name.clone()) {
                return Err(Error::parse(start, format!("duplicate parameter {}", p.name)));
            }
            let n = p.shape[0]
                .checked_mul(p.shape[1])
                .filter(|n| n.checked_mul(4).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| Error::parse(r.offset(), format!("buffer for {} exceeds file", p.name)))?;
            let data = r.f32s(n, &p.name)?;
            params.push((p.name, p.shape, data));
        }
        r.finish()?;
        Ok(Checkpoint { kind: header.kind, config: header.config, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        binio::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&binio::read_file(path)?)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::invalid(format!("checkpoint holds a {} model, expected {kind}", self.kind)));
        }
        Ok(())
    }

    /// Overwrites every parameter of `store`; names and shapes must match exactly.
    pub fn apply_to(&self, store: &mut ParamStore) -> Result<()> {
        if self.params.len() != store.len() {
            return Err(Error::DimMismatch { expected: store.len(), got: self.params.len() });
        }
        let mut values = Vec::with_capacity(self.params.len());
        for (id, (name, shape, data)) in store.ids().zip(&self.params) {
            if store.name(id) != name || store.get(id).shape() != *shape {
                return Err(Error::invalid(format!(
                    "checkpoint parameter {name} {shape:?} does not match {} {:?}",
                    store.name(id),
                    store.get(id).shape()
                )));
            }
            values.push(Tensor::new(shape[0], shape[1], data.iter().map(|&v| v as f64).collect())?);
        }
        store.set_values(values)
    }
}
