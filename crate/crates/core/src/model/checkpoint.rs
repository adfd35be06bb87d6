//! Flat binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "FUSEDKV\0"
//! version      u32      1
//! elem bytes   u8       4 (f32) or 8 (f64)
//! config len   u32      followed by the model config as JSON
//! count        u32      number of tensors
//! per tensor:
//!   name len   u32      followed by the UTF-8 name
//!   ndim       u32      followed by ndim u64 extents
//!   data       numel × elem bytes, IEEE 754, row-major
//! ```
//!
//! Tensors appear in model parameter order.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

use super::config::ModelConfig;
use super::params::{build_model, Model};

pub const MAGIC: &[u8; 8] = b"FUSEDKV\0";
pub const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, x: usize) -> Result<()> {
    let x = u32::try_from(x).map_err(|_| Error::Format(format!("{x} does not fit in u32")))?;
    out.extend_from_slice(&x.to_le_bytes());
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("four bytes")) as usize)
    }

    fn u64(&mut self) -> Result<usize> {
        let b = self.take(8)?;
        usize::try_from(u64::from_le_bytes(b.try_into().expect("eight bytes")))
            .map_err(|_| Error::Format("extent overflows usize".into()))
    }
}

impl<T: Real> Model<T> {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(T::BYTES as u8);
        let cfg = serde_json::to_vec(&self.cfg)?;
        put_u32(&mut out, cfg.len())?;
        out.extend_from_slice(&cfg);
        put_u32(&mut out, self.params.len())?;
        for (name, t) in self.names.iter().zip(&self.params) {
            put_u32(&mut out, name.len())?;
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.ndim())?;
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &x in t.data() {
                x.write_le(&mut out);
            }
        }
        Ok(out)
    }

    pub fn save(&self, mut w: impl Write) -> Result<()> {
        w.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut c = Cursor { buf, pos: 0 };
        if c.take(8)? != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = c.u32()?;
        if version != VERSION as usize {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let width = c.take(1)?[0] as usize;
        if width != T::BYTES {
            return Err(Error::Format(format!(
                "checkpoint holds {width}-byte elements, loading as {}",
                T::NAME
            )));
        }
        let cfg_len = c.u32()?;
        let cfg: ModelConfig = serde_json::from_slice(c.take(cfg_len)?)?;
        let mut model = build_model::<T>(&cfg, 0)?;
        let count = c.u32()?;
        if count != model.params.len() {
            return Err(Error::Format(format!(
                "{count} tensors for a model with {}",
                model.params.len()
            )));
        }
        for idx in 0..count {
            let name_len = c.u32()?;
            let name = std::str::from_utf8(c.take(name_len)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
            if name != model.names[idx] {
                return Err(Error::Format(format!(
                    "tensor {idx} is {name:?}, expected {:?}",
                    model.names[idx]
                )));
            }
            let ndim = c.u32()?;
            let shape = (0..ndim).map(|_| c.u64()).collect::<Result<Vec<_>>>()?;
            if shape != model.params[idx].shape() {
                return Err(Error::Format(format!("tensor {name} has shape {shape:?}")));
            }
            let numel: usize = shape.iter().product();
            let raw = c.take(numel * width)?;
            let data = raw.chunks_exact(width).map(T::read_le).collect();
            model.params[idx] = Tensor::new(shape, data)?;
        }
        if c.pos != buf.len() {
            return Err(Error::Format(format!("{} trailing bytes", buf.len() - c.pos)));
        }
        Ok(model)
    }

    pub fn load(mut r: impl Read) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}
