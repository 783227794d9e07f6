//! Binary checkpoint format.
//!
//! ```text
//! "ACAM"  u32 version
//! u32 hyperparameter block length, then the block:
//!   u64 d, d_k, d_v, m, l   f64 lambda1, lambda2
//!   u8 tie_kv, attention_softmax, coattention   u64 hidden1, hidden2
//! u32 tensor count, then per tensor:
//!   u32 name length, name (UTF-8), u32 rank, u64 dims[rank], f64 data[..]
//! ```
//! All integers and floats little-endian; tensors in store order.

use std::fs;
use std::path::Path;

use crate::diff::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::model::{Hyperparams, ModelParams};

pub const MAGIC: &[u8; 4] = b"ACAM";
pub const VERSION: u32 = 1;

fn hyper_block(h: &Hyperparams) -> Vec<u8> {
    let mut b = Vec::new();
    for v in [h.d, h.d_k, h.d_v, h.m, h.l] {
        b.extend_from_slice(&(v as u64).to_le_bytes());
    }
    b.extend_from_slice(&h.lambda1.to_le_bytes());
    b.extend_from_slice(&h.lambda2.to_le_bytes());
    b.extend([h.tie_kv as u8, h.attention_softmax as u8, h.coattention as u8]);
    for v in h.mlp_hidden {
        b.extend_from_slice(&(v as u64).to_le_bytes());
    }
    b
}

pub fn encode(params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + 8 * params.store.total_elements());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let block = hyper_block(&params.hyper);
    out.extend_from_slice(&(block.len() as u32).to_le_bytes());
    out.extend_from_slice(&block);
    out.extend_from_slice(&(params.store.len() as u32).to_le_bytes());
    for (_, name, t) in params.store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("dimension overflow".into()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn flag(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(Error::Checkpoint(format!("invalid flag byte {other}"))),
        }
    }
}

pub fn decode(bytes: &[u8]) -> Result<ModelParams> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic bytes".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let block_len = r.u32()? as usize;
    let block_start = r.pos;
    let hyper = Hyperparams {
        d: r.usize()?,
        d_k: r.usize()?,
        d_v: r.usize()?,
        m: r.usize()?,
        l: r.usize()?,
        lambda1: r.f64()?,
        lambda2: r.f64()?,
        tie_kv: r.flag()?,
        attention_softmax: r.flag()?,
        coattention: r.flag()?,
        mlp_hidden: [r.usize()?, r.usize()?],
    };
    if r.pos - block_start != block_len {
        return Err(Error::Checkpoint("hyperparameter block length mismatch".into()));
    }
    let count = r.u32()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.usize()?);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store.insert(name, Tensor::new(shape, data)?)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    ModelParams::from_store(hyper, store)
}

pub fn save(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(params)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<ModelParams> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
