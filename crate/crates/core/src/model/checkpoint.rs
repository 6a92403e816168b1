//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes  "XMODCKPT"
//! version   u32
//! config    u32 length + UTF-8 JSON of ModelConfig
//! count     u32 number of tensors
//! tensor*   u32 key length, key bytes, u32 rank, u64 extents..., f64 values...
//! ```
//!
//! Tensors are written in key order, so save → load → save is byte-identical.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{ModelConfig, ModelError, ModelWeights};
use crate::numerics::{ParamMap, Tensor};

pub const MAGIC: &[u8; 8] = b"XMODCKPT";
pub const VERSION: u32 = 1;

pub fn to_bytes(config: &ModelConfig, weights: &ModelWeights) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + weights.num_scalars() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = serde_json::to_vec(config).expect("config serializes");
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(&cfg);
    out.extend_from_slice(&(weights.params().len() as u32).to_le_bytes());
    for (key, t) in weights.params() {
        out.extend_from_slice(&(key.len() as u32).to_le_bytes());
        out.extend_from_slice(key.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], ModelError> {
        if self.buf.len() - self.pos < n {
            return Err(ModelError::Checkpoint(format!(
                "truncated while reading {what}"
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<(ModelConfig, ModelWeights), ModelError> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(8, "magic")? != MAGIC {
        return Err(ModelError::Checkpoint(
            "not a checkpoint file (bad magic)".into(),
        ));
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(ModelError::Version {
            found: version,
            supported: VERSION,
        });
    }
    let len = c.u32("config length")? as usize;
    let config: ModelConfig = serde_json::from_slice(c.take(len, "config")?)
        .map_err(|e| ModelError::Checkpoint(format!("config: {e}")))?;
    let count = c.u32("tensor count")?;
    let mut params = ParamMap::new();
    for _ in 0..count {
        let klen = c.u32("key length")? as usize;
        let key = std::str::from_utf8(c.take(klen, "key")?)
            .map_err(|_| ModelError::Checkpoint("key is not UTF-8".into()))?
            .to_string();
        let rank = c.u32(&key)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u64(&key)? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = c.take(
            n.checked_mul(8)
                .ok_or_else(|| ModelError::Checkpoint(format!("{key}: shape overflow")))?,
            &key,
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let t = Tensor::new(shape, data)?;
        if params.insert(key.clone(), t).is_some() {
            return Err(ModelError::Checkpoint(format!("duplicate tensor {key}")));
        }
    }
    if c.pos != buf.len() {
        return Err(ModelError::Checkpoint(
            "trailing bytes after last tensor".into(),
        ));
    }
    let weights = ModelWeights::from_params(params);
    weights.check_against(&config)?;
    Ok((config, weights))
}

pub fn save(path: &Path, config: &ModelConfig, weights: &ModelWeights) -> Result<(), ModelError> {
    let bytes = to_bytes(config, weights);
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(ModelConfig, ModelWeights), ModelError> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    from_bytes(&buf)
}
