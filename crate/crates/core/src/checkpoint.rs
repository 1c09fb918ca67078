//! Binary parameter bundles.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"PSMA"  u32 version
//! u32 config_len   config_len bytes of JSON (ModelConfig)
//! u32 param_count
//! per parameter, in name order:
//!   u32 name_len   name bytes (UTF-8)
//!   u32 rank       rank × u64 extents
//!   product(extents) × f64 values
//! ```
//!
//! Values carry no checksum: a flipped payload byte is only detected when
//! it breaks the structure.

use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PSMA";
pub const VERSION: u32 = 1;

pub fn encode(params: &ModelParams) -> Result<Vec<u8>> {
    encode_with_version(params, VERSION)
}

fn encode_with_version(params: &ModelParams, version: u32) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(16 + params.num_scalars() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&version.to_le_bytes());
    let cfg = serde_json::to_vec(&params.config)?;
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(&cfg);
    out.extend_from_slice(&(params.store.len() as u32).to_le_bytes());
    for (name, t) in params.store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.dims() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint {
                offset: self.pos,
                reason: format!("truncated while reading {what}: need {n} bytes, {} left", self.bytes.len() - self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn fail(&self, at: usize, reason: impl Into<String>) -> Error {
        Error::Checkpoint {
            offset: at,
            reason: reason.into(),
        }
    }
}

pub fn decode(bytes: &[u8]) -> Result<ModelParams> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(r.fail(0, "bad magic, expected PSMA"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let cfg_len = r.u32("config length")? as usize;
    let cfg_at = r.pos;
    let config: ModelConfig = serde_json::from_slice(r.take(cfg_len, "config")?)
        .map_err(|e| r.fail(cfg_at, format!("invalid model config: {e}")))?;
    let count = r.u32("parameter count")?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_at = r.pos;
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| r.fail(name_at, "parameter name is not UTF-8"))?
            .to_string();
        let rank_at = r.pos;
        let rank = r.u32("rank")? as usize;
        if rank == 0 || rank > 8 {
            return Err(r.fail(rank_at, format!("implausible rank {rank} for {name:?}")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u64("extent")? as usize);
        }
        let n: usize = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).unwrap_or(usize::MAX);
        if n == 0 || n > (bytes.len() - r.pos) / 8 {
            return Err(r.fail(r.pos, format!("payload of {name:?} ({dims:?}) exceeds the file")));
        }
        let raw = r.take(n * 8, "values")?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        store
            .insert(&name, Tensor::from_values(&dims, values)?)
            .map_err(|_| r.fail(name_at, format!("duplicate parameter {name:?}")))?;
    }
    if r.pos != bytes.len() {
        return Err(r.fail(r.pos, "trailing bytes after the last parameter"));
    }
    let expected = ModelParams::init(config.clone(), 0)?;
    for (name, t) in expected.store.iter() {
        match store.get(name) {
            Some(found) if found.dims() == t.dims() => {}
            Some(found) => {
                return Err(r.fail(0, format!("{name:?} has dims {:?}, config expects {:?}", found.dims(), t.dims())))
            }
            None => return Err(r.fail(0, format!("parameter {name:?} missing"))),
        }
    }
    if store.len() != expected.store.len() {
        return Err(r.fail(0, "checkpoint holds parameters the config does not declare"));
    }
    Ok(ModelParams { config, store })
}

pub fn save_checkpoint(path: impl AsRef<Path>, params: &ModelParams) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(params)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams> {
    let path = path.as_ref();
    decode(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
