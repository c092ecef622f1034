// SPDX-License-Identifier: MIT OR Apache-2.0

//! `LFT1` model checkpoints.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! "LFT1"
//! n_layers n_heads d_model d_head vocab_size max_seq mlp_hidden frozen
//! tensor_count
//! per tensor: name_len name rank dims... f32 data (row-major, LE)
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use lofit_core::{Model, ModelConfig, Tensor};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"LFT1";

pub fn encode(model: &Model) -> Vec<u8> {
    let c = &model.config;
    let mut out = Vec::with_capacity(16 + 4 * model.parameter_count() + 64 * 48);
    out.extend_from_slice(MAGIC);
    let header = [c.n_layers, c.n_heads, c.d_model, c.d_head, c.vocab_size, c.max_seq, c.mlp_hidden, model.frozen as usize];
    for v in header {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    let tensors = model.named_tensors();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
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
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.buf.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<usize> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?) as usize)
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Model> {
    let bad = |d: &str| Error::format(path, format!("invalid checkpoint: {d}"));
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4) != Some(MAGIC.as_slice()) {
        return Err(bad("missing LFT1 magic"));
    }
    let mut h = [0usize; 8];
    for v in &mut h {
        *v = r.u32().ok_or_else(|| bad("truncated header"))?;
    }
    let config = ModelConfig { n_layers: h[0], n_heads: h[1], d_model: h[2], d_head: h[3], vocab_size: h[4], max_seq: h[5], mlp_hidden: h[6] };
    let count = r.u32().ok_or_else(|| bad("truncated header"))?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let len = r.u32().ok_or_else(|| bad("truncated tensor name"))?;
        let name = std::str::from_utf8(r.take(len).ok_or_else(|| bad("truncated tensor name"))?)
            .map_err(|_| bad("tensor name is not UTF-8"))?
            .to_owned();
        let rank = r.u32().ok_or_else(|| bad("truncated shape"))?;
        if rank == 0 || rank > 4 {
            return Err(bad(&format!("tensor {name} has rank {rank}")));
        }
        let shape = (0..rank).map(|_| r.u32()).collect::<Option<Vec<_>>>().ok_or_else(|| bad("truncated shape"))?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| bad("shape overflow"))?;
        let raw = r.take(n.checked_mul(4).ok_or_else(|| bad("shape overflow"))?).ok_or_else(|| bad(&format!("truncated data for {name}")))?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        if tensors.insert(name.clone(), Tensor::new(&shape, data)?).is_some() {
            return Err(bad(&format!("duplicate tensor {name}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    let mut model = Model::from_named(config, tensors)?;
    model.frozen = h[7] != 0;
    Ok(model)
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, encode(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
