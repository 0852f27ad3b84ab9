//! Binary checkpoint container.
//!
//! Layout (all integers little-endian `u32`):
//!
//! ```text
//! "MTCK"  version  config_len  config_bytes[config_len]  n_tensors
//! repeat n_tensors:
//!     name_len  name_bytes  ndim  dims[ndim]  f32 data (LE, row-major)
//! ```
//!
//! The config block is the resolved `key=value` configuration the model was
//! built from, so a checkpoint is self-describing.

use std::fs;
use std::path::Path;

use super::{ParamStore, Real};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MTCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub tensors: Vec<TensorRecord>,
}

impl Checkpoint {
    pub fn from_store<F: Real>(config_text: String, store: &ParamStore<F>) -> Self {
        Self {
            config_text,
            tensors: store
                .iter()
                .map(|p| TensorRecord {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: p.values.iter().map(|v| v.as_f64() as f32).collect(),
                })
                .collect(),
        }
    }

    /// Copies tensors into `store`. Every model parameter must be present
    /// with the same shape, and the checkpoint may not carry extra tensors.
    pub fn load_into<F: Real>(&self, store: &mut ParamStore<F>) -> Result<()> {
        for param in store.iter() {
            let rec = self
                .tensors
                .iter()
                .find(|t| t.name == param.name)
                .ok_or_else(|| Error::MissingParam(param.name.clone()))?;
            if rec.shape != param.shape {
                return Err(Error::ParamShape {
                    name: param.name.clone(),
                    expected: param.shape.clone(),
                    found: rec.shape.clone(),
                });
            }
        }
        if let Some(extra) = self.tensors.iter().find(|t| store.find(&t.name).is_none()) {
            return Err(Error::UnexpectedParam(extra.name.clone()));
        }
        for param in store.iter_mut() {
            let rec = self
                .tensors
                .iter()
                .find(|t| t.name == param.name)
                .expect("checked above");
            for (v, &d) in param.values.iter_mut().zip(&rec.data) {
                *v = F::of(d as f64);
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        put_u32(&mut out, self.config_text.len() as u32);
        out.extend_from_slice(self.config_text.as_bytes());
        put_u32(&mut out, self.tensors.len() as u32);
        for t in &self.tensors {
            put_u32(&mut out, t.name.len() as u32);
            out.extend_from_slice(t.name.as_bytes());
            put_u32(&mut out, t.shape.len() as u32);
            for &d in &t.shape {
                put_u32(&mut out, d as u32);
            }
            for &v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Corrupt("bad checkpoint magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let config_len = r.u32()? as usize;
        let config_text = String::from_utf8(r.take(config_len)?.to_vec())
            .map_err(|_| Error::Corrupt("config block is not UTF-8".into()))?;
        let n = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Corrupt("tensor name is not UTF-8".into()))?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let count = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
            let count = count.ok_or_else(|| Error::Corrupt(format!("tensor `{name}` is too large")))?;
            let raw = r.take(
                count
                    .checked_mul(4)
                    .ok_or_else(|| Error::Corrupt("size overflow".into()))?,
            )?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push(TensorRecord { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { config_text, tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingPath(path.to_path_buf()));
        }
        Self::from_bytes(&fs::read(path)?)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Corrupt(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
