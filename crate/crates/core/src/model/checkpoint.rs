//! Flat binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "DINSCKPT"
//! version    u32      currently 1
//! config     7 × u64  n_layers d_model d_ff n_heads vocab_size max_positions insert_layer
//! n_meta     u32
//!   key_len u32, key utf-8, value u64          (repeated n_meta times)
//! n_tensors  u32
//!   name_len u32, name utf-8, rows u32, cols u32, rows·cols × f32   (repeated)
//! ```

use std::fs;
use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

use super::{ModelConfig, Weights};

pub const MAGIC: &[u8; 8] = b"DINSCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub meta: Vec<(String, u64)>,
    pub tensors: Vec<(String, Matrix)>,
}

impl Checkpoint {
    pub fn from_weights(config: ModelConfig, w: &Weights) -> Self {
        let tensors = w.named().into_iter().map(|(n, t)| (n, t.clone())).collect();
        Self { config, meta: Vec::new(), tensors }
    }

    pub fn meta(&self, key: &str) -> Option<u64> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| *v)
    }

    pub fn tensor(&self, name: &str) -> Option<&Matrix> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Copies every tensor named `prefix + <name>` into the matching tensor
    /// of `dst`, rejecting missing tensors and shape mismatches by name.
    pub fn fill<'a>(&self, prefix: &str, dst: impl IntoIterator<Item = (String, &'a mut Matrix)>) -> Result<()> {
        for (name, t) in dst {
            let full = format!("{prefix}{name}");
            let src = self
                .tensor(&full)
                .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor {full}")))?;
            if src.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "tensor {full} has shape {:?}, expected {:?}",
                    src.shape(),
                    t.shape()
                )));
            }
            *t = src.clone();
        }
        Ok(())
    }

    /// Rebuilds model weights for `expected`, naming the first mismatching tensor.
    pub fn weights(&self, expected: &ModelConfig) -> Result<Weights> {
        let mut w = Weights::zeros(expected);
        self.fill("", w.named_mut())?;
        Ok(w)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let c = &self.config;
        for v in [c.n_layers, c.d_model, c.d_ff, c.n_heads, c.vocab_size, c.max_positions, c.insert_layer] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            out.extend_from_slice(&(k.len() as u32).to_le_bytes());
            out.extend_from_slice(k.as_bytes());
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Format(format!("checkpoint version {version}, expected {VERSION}")));
        }
        let mut vals = [0usize; 7];
        for v in &mut vals {
            *v = read_u64(&mut r)? as usize;
        }
        let config = ModelConfig {
            n_layers: vals[0],
            d_model: vals[1],
            d_ff: vals[2],
            n_heads: vals[3],
            vocab_size: vals[4],
            max_positions: vals[5],
            insert_layer: vals[6],
        };
        let n_meta = read_u32(&mut r)?;
        let mut meta = Vec::with_capacity(n_meta as usize);
        for _ in 0..n_meta {
            let k = read_string(&mut r)?;
            meta.push((k, read_u64(&mut r)?));
        }
        let n = read_u32(&mut r)?;
        let mut tensors = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let name = read_string(&mut r)?;
            let rows = read_u32(&mut r)? as usize;
            let cols = read_u32(&mut r)? as usize;
            let len = rows
                .checked_mul(cols)
                .filter(|&l| l.saturating_mul(4) <= r.len())
                .ok_or_else(|| Error::Format(format!("tensor {name} truncated")))?;
            let data = r[..len * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            r = &r[len * 4..];
            tensors.push((name, Matrix::from_vec(rows, cols, data)?));
        }
        if !r.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes after checkpoint", r.len())));
        }
        Ok(Self { config, meta, tensors })
    }

    /// Writes to a sibling temp file, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        crate::fsutil::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::Format("checkpoint truncated".into()))
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_string(r: &mut &[u8]) -> Result<String> {
    let len = read_u32(r)? as usize;
    if len > r.len() {
        return Err(Error::Format("checkpoint truncated".into()));
    }
    let s = std::str::from_utf8(&r[..len]).map_err(|_| Error::Format("tensor name is not utf-8".into()))?;
    *r = &r[len..];
    Ok(s.to_string())
}
