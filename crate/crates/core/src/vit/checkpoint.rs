//! Single-file checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        b"PMCKPT\0\0"            8 bytes
//! version      u32                      currently 1
//! float_bits   u32                      32 or 64
//! config_len   u32, config JSON bytes   the ModelConfig
//! count        u32                      number of tensors
//! per tensor, in ParamVisitor order:
//!   name_len u32, name UTF-8 bytes      e.g. "blocks/0/attn/wq", "merger/W"
//!   ndim u32, dims u64 * ndim
//!   data, product(dims) floats of float_bits each
//! ```
//!
//! Loading checks the magic, version, float width, the config and every
//! tensor name and shape against a freshly built parameter set.

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::model::Model;
use super::params::{ModelParams, ParamVisitor};
use crate::error::{Error, Result};
use crate::numcore::Real;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PMCKPT\0\0";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_len(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint("length exceeds u32".into()))?;
    put_u32(out, v);
    Ok(())
}

/// Serializes a model to checkpoint bytes.
pub fn checkpoint_bytes<T: Real>(model: &Model<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut out, CHECKPOINT_VERSION);
    put_u32(&mut out, T::BITS);
    let config = serde_json::to_vec(&model.config)?;
    put_len(&mut out, config.len())?;
    out.extend_from_slice(&config);
    let named = model.params.named();
    put_len(&mut out, named.len())?;
    for (name, t) in named {
        put_len(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_len(&mut out, t.shape().len())?;
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            if T::BITS == 32 {
                out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            } else {
                out.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn save_checkpoint<T: Real>(model: &Model<T>, mut w: impl Write) -> Result<()> {
    w.write_all(&checkpoint_bytes(model)?)?;
    w.flush()?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("unexpected end of file".into()))?;
        let s = &self.buf[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parses checkpoint bytes written by [`checkpoint_bytes`] with the same float width.
pub fn model_from_checkpoint<T: Real>(bytes: &[u8]) -> Result<Model<T>> {
    let bad = |m: String| Err(Error::Checkpoint(m));
    let mut c = Cursor { buf: bytes, at: 0 };
    if c.take(8)? != CHECKPOINT_MAGIC {
        return bad("not a checkpoint file (bad magic)".into());
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return bad(format!("unsupported checkpoint version {version}"));
    }
    let bits = c.u32()?;
    if bits != T::BITS {
        return bad(format!("checkpoint stores {bits}-bit floats, expected {}", T::BITS));
    }
    let config_len = c.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(c.take(config_len)?)?;
    config.validate()?;
    // Values are overwritten below; the seed only fixes the structure.
    let mut params = ModelParams::<T>::init(&config, &mut ChaCha8Rng::seed_from_u64(0))?;
    let count = c.u32()? as usize;
    let mut slots = params.named_mut();
    if count != slots.len() {
        return bad(format!("checkpoint has {count} tensors, model needs {}", slots.len()));
    }
    for (name, t) in slots.iter_mut() {
        let name_len = c.u32()? as usize;
        let got = std::str::from_utf8(c.take(name_len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        if got != name {
            return bad(format!("expected tensor {name}, found {got}"));
        }
        let ndim = c.u32()? as usize;
        let dims = (0..ndim).map(|_| c.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if dims != t.shape() {
            return bad(format!("tensor {name}: shape {dims:?}, expected {:?}", t.shape()));
        }
        let width = bits as usize / 8;
        let raw = c.take(t.len() * width)?;
        for (dst, chunk) in t.data_mut().iter_mut().zip(raw.chunks_exact(width)) {
            let v = if width == 4 {
                f32::from_le_bytes(chunk.try_into().unwrap()) as f64
            } else {
                f64::from_le_bytes(chunk.try_into().unwrap())
            };
            *dst = T::lit(v);
        }
    }
    drop(slots);
    if c.at != bytes.len() {
        return bad("trailing bytes after last tensor".into());
    }
    Model::new(config, params)
}

pub fn load_checkpoint<T: Real>(mut r: impl Read) -> Result<Model<T>> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    model_from_checkpoint(&bytes)
}
