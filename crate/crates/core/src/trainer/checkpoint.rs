//! Binary checkpoint container.
//!
//! ```text
//! magic "GVLMCKPT" | u32 version
//! u32 len + config hash (hex) | u32 len + config (key = value lines)
//! u64 completed steps
//! u32 tensor count, then per tensor:
//!   u32 len + name | u32 ndim | ndim × u32 dims | f32 values | f32 momentum
//! 32-byte SHA-256 of everything above
//! ```
//! The per-step random streams are derived from the seed in the config and
//! the step counter, so together they are the full generator state.

use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::TrainState;
use crate::autograd::Tensor;
use crate::config::Config;
use crate::encoders::{Model, ParamStore};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"GVLMCKPT";
const VERSION: u32 = 1;
const CHECKSUM_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: Config,
    pub config_hash: String,
    pub step: usize,
    pub params: ParamStore<f32>,
    pub buffers: Vec<Vec<f32>>,
}

impl Checkpoint {
    pub fn from_state(s: &TrainState) -> Self {
        Self {
            config: s.config.clone(),
            config_hash: s.config.hash(),
            step: s.step,
            params: s.model.params.clone(),
            buffers: s.buffers.clone(),
        }
    }

    pub fn into_state(self) -> Result<TrainState> {
        let model = Model::from_params(&self.config.model, self.params)?;
        Ok(TrainState {
            config: self.config,
            model,
            buffers: self.buffers,
            step: self.step,
        })
    }

    pub fn model(&self) -> Result<Model<f32>> {
        Model::from_params(&self.config.model, self.params.clone())
    }

    /// Refuses a checkpoint written under a different configuration.
    pub fn expect_hash(&self, expected: &str) -> Result<()> {
        if self.config_hash != expected {
            return Err(Error::HashMismatch {
                expected: expected.to_owned(),
                found: self.config_hash.clone(),
            });
        }
        Ok(())
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len());
    out.extend_from_slice(s.as_bytes());
}

fn put_f32s(out: &mut Vec<u8>, xs: &[f32]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn write_checkpoint(c: &Checkpoint, mut w: impl Write) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_str(&mut out, &c.config_hash);
    put_str(&mut out, &c.config.to_kv());
    out.extend_from_slice(&(c.step as u64).to_le_bytes());
    put_u32(&mut out, c.params.len());
    for (i, (name, t)) in c.params.iter().enumerate() {
        put_str(&mut out, name);
        put_u32(&mut out, t.shape().len());
        for &d in t.shape() {
            put_u32(&mut out, d);
        }
        put_f32s(&mut out, t.data());
        put_f32s(&mut out, &c.buffers[i]);
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    w.write_all(&out)?;
    Ok(())
}

/// Writes to a sibling temporary file and renames it into place.
pub fn save_checkpoint(c: &Checkpoint, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(c, &mut buf)?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &buf)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format("checkpoint truncated"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format("invalid UTF-8 in checkpoint"))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = n.checked_mul(4).ok_or_else(|| Error::format("tensor too large"))?;
        Ok(self
            .take(bytes)?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect())
    }
}

/// Reads and verifies a checkpoint; any failure returns an error and no
/// partial state.
pub fn read_checkpoint(mut r: impl Read) -> Result<Checkpoint> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    if buf.len() < MAGIC.len() + CHECKSUM_LEN || &buf[..MAGIC.len()] != MAGIC {
        return Err(Error::format("not a checkpoint file"));
    }
    let (body, digest) = buf.split_at(buf.len() - CHECKSUM_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::format("checkpoint checksum mismatch"));
    }
    let mut c = Cursor {
        buf: body,
        pos: MAGIC.len(),
    };
    let version = c.u32()? as u32;
    if version != VERSION {
        return Err(Error::format(format!("unsupported checkpoint version {version}")));
    }
    let config_hash = c.string()?;
    let config = Config::parse_str(&c.string()?)?;
    if config.hash() != config_hash {
        return Err(Error::HashMismatch {
            expected: config.hash(),
            found: config_hash,
        });
    }
    let step = u64::from_le_bytes(c.take(8)?.try_into().expect("8 bytes")) as usize;
    let n = c.u32()?;
    let mut params = ParamStore::new();
    let mut buffers = Vec::with_capacity(n);
    for _ in 0..n {
        let name = c.string()?;
        let nd = c.u32()?;
        let shape = (0..nd).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let data = c.f32s(len)?;
        buffers.push(c.f32s(len)?);
        params.push(name, Tensor::new(&shape, data));
    }
    if c.pos != body.len() {
        return Err(Error::format("trailing bytes in checkpoint"));
    }
    Ok(Checkpoint {
        config,
        config_hash,
        step,
        params,
        buffers,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    read_checkpoint(std::fs::File::open(path)?)
}
