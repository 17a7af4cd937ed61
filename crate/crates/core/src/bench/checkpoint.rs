//! Binary checkpoint format, all integers and floats little-endian:
//!
//! ```text
//! magic      8 bytes  "EPRBCKPT"
//! version    u32      1
//! kind       str      "ep" | "bp" | "adv"
//! spec       str      ModelSpec as JSON
//! config     str      training config snapshot (key = value text)
//! seed       u64
//! timestep   u64      u64::MAX when unset
//! channels   u32      then `channels` f64 means and `channels` f64 stds
//! tensors    u32      count, then per tensor:
//!                     name str, rank u32, rank x u64 dims, f64 values
//! ```
//!
//! `str` is a u32 byte length followed by UTF-8.

use std::path::Path;

use crate::energy::{Params, ModelSpec};
use crate::error::{Error, Result};
use crate::model::{Model, ModelKind, Normalizer};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"EPRBCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub config: String,
    pub seed: u64,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let m = &self.model;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, m.kind.as_str());
        put_str(&mut out, &serde_json::to_string(&m.spec)?);
        put_str(&mut out, &self.config);
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&m.timestep.map_or(u64::MAX, |t| t as u64).to_le_bytes());
        out.extend_from_slice(&(m.norm.mean.len() as u32).to_le_bytes());
        for v in m.norm.mean.iter().chain(&m.norm.std) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let named = m.params.named();
        out.extend_from_slice(&(named.len() as u32).to_le_bytes());
        for (name, t) in named {
            put_str(&mut out, &name);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic bytes; not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let kind = ModelKind::parse(&r.str()?)?;
        let spec: ModelSpec = serde_json::from_str(&r.str()?)?;
        let config = r.str()?;
        let seed = r.u64()?;
        let timestep = match r.u64()? {
            u64::MAX => None,
            t => Some(t as usize),
        };
        let channels = r.u32()? as usize;
        let mean = (0..channels).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let std = (0..channels).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let mut params = Params::zeros(&spec)?;
        let expected: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
        let count = r.u32()? as usize;
        if count != expected.len() {
            return Err(Error::Checkpoint(format!("expected {} tensors, found {count}", expected.len())));
        }
        for (slot, want) in params.tensors_mut().into_iter().zip(&expected) {
            let name = r.str()?;
            if &name != want {
                return Err(Error::Checkpoint(format!("expected tensor {want}, found {name}")));
            }
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            if shape != slot.shape() {
                return Err(Error::Checkpoint(format!("{name}: shape {shape:?}, spec wants {:?}", slot.shape())));
            }
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            *slot = Tensor::new(shape, data)?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let mut model = Model::new(kind, spec, params, Normalizer { mean, std })?;
        model.timestep = timestep;
        Ok(Self { model, config, seed })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8 string".into()))
    }
}
