//! Checkpoint layout (little endian):
//!
//! ```text
//! "CVCK" | u16 version | u32 len | manifest JSON | u32 count
//! count × { u32 len | name | u32 ndim | ndim × u32 | f32 payload | u32 crc }
//! ```
//!
//! The CRC covers the whole tensor record up to the checksum itself.

use std::path::Path;

use super::adamw::AdamW;
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

const OPT_M: &str = "opt.m/";
const OPT_V: &str = "opt.v/";

pub const MAGIC: &[u8; 4] = b"CVCK";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: serde_json::Value,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let manifest = serde_json::to_vec(&self.manifest)?;
        put_u32(&mut out, manifest.len())?;
        out.extend_from_slice(&manifest);
        put_u32(&mut out, self.tensors.len())?;
        for (name, t) in &self.tensors {
            let start = out.len();
            put_u32(&mut out, name.len())?;
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.shape().len())?;
            for &d in t.shape() {
                put_u32(&mut out, d)?;
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            let crc = crc32fast::hash(&out[start..]);
            out.extend_from_slice(&crc.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::BadMagic(path.to_path_buf()));
        }
        let version = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes"));
        if version != VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: VERSION,
            });
        }
        let mlen = r.u32()?;
        let manifest = serde_json::from_slice(r.take(mlen)?)?;
        let count = r.u32()?;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let start = r.pos;
            let nlen = r.u32()?;
            let name = String::from_utf8(r.take(nlen)?.to_vec())
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            let ndim = r.u32()?;
            let shape = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("tensor `{name}` is too large")))?;
            let payload = r.take(n.checked_mul(4).ok_or_else(|| Error::Format(format!("tensor `{name}` is too large")))?)?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let crc_expected = crc32fast::hash(&bytes[start..r.pos]);
            let crc = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
            if crc != crc_expected {
                return Err(Error::Checksum(format!("tensor `{name}`")));
            }
            tensors.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after the last tensor",
                bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint { manifest, tensors })
    }

    /// Every parameter under its own name, plus Adam moments under
    /// `opt.m/` and `opt.v/` when an optimizer is given.
    pub fn from_store(manifest: serde_json::Value, store: &ParamStore<f32>, opt: Option<&AdamW<f32>>) -> Self {
        let mut tensors: Vec<(String, Tensor<f32>)> =
            store.named().map(|(n, t)| (n.to_string(), t.clone())).collect();
        if let Some(opt) = opt {
            for (id, m, v) in opt.moments() {
                let shape = store.get(id).shape().to_vec();
                let name = store.name(id);
                tensors.push((format!("{OPT_M}{name}"), Tensor::new(shape.clone(), m.to_vec()).expect("moment shape")));
                tensors.push((format!("{OPT_V}{name}"), Tensor::new(shape, v.to_vec()).expect("moment shape")));
            }
        }
        Checkpoint { manifest, tensors }
    }

    /// Loads every parameter of `store` by name; extra tensors are ignored.
    pub fn load_params(&self, store: &mut ParamStore<f32>) -> Result<()> {
        store.load_named(self.tensors.iter().map(|(n, t)| (n.as_str(), t)))
    }

    /// Restores Adam moments saved by [`Checkpoint::from_store`].
    pub fn restore_optimizer(&self, store: &ParamStore<f32>, opt: &mut AdamW<f32>, step: u64) -> Result<()> {
        let mut moments = Vec::new();
        for (name, m) in &self.tensors {
            let Some(pname) = name.strip_prefix(OPT_M) else {
                continue;
            };
            let id = store
                .find(pname)
                .ok_or_else(|| Error::Format(format!("optimizer state for unknown parameter `{pname}`")))?;
            let v = self
                .get(&format!("{OPT_V}{pname}"))
                .ok_or_else(|| Error::Format(format!("missing second moment for `{pname}`")))?;
            moments.push((id, m.clone(), v.clone()));
        }
        opt.restore(store, step, moments)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Truncated(format!("need {n} bytes at offset {}", self.pos)));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
}
