//! Binary checkpoint: model config plus every parameter tensor, protected by
//! a trailing SHA-256 digest.
//!
//! All integers are little-endian `u32`; values are little-endian `f32`.
//!
//! ```text
//! magic        8 bytes   "ELGCCKPT"
//! version      u32       1
//! config_len   u32
//! config       config_len bytes of UTF-8 JSON (ModelConfig)
//! count        u32       number of tensors, written in ascending name order
//! per tensor:
//!   name_len   u32
//!   name       name_len bytes of UTF-8
//!   rank       u32
//!   dims       rank × u32
//!   values     prod(dims) × f32
//! digest       32 bytes  SHA-256 of every preceding byte
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{param_specs, ModelConfig};
use crate::error::{Error, Result};
use crate::params::ModelParams;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"ELGCCKPT";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("value {v} does not fit in u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn to_bytes(config: &ModelConfig, params: &ModelParams<f32>) -> Result<Vec<u8>> {
    let mut buf = Vec::with_capacity(16 + params.num_scalars() * 4);
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, VERSION as usize)?;
    let json = serde_json::to_vec(config).map_err(|e| Error::Checkpoint(format!("config serialization: {e}")))?;
    put_u32(&mut buf, json.len())?;
    buf.extend_from_slice(&json);
    put_u32(&mut buf, params.len())?;
    for (name, t) in params.iter() {
        put_u32(&mut buf, name.len())?;
        buf.extend_from_slice(name.as_bytes());
        put_u32(&mut buf, t.rank())?;
        for &d in t.shape() {
            put_u32(&mut buf, d)?;
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    Ok(buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(Error::Checkpoint(format!("truncated while reading {what} at byte {}", self.pos)));
        };
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

/// Parses and verifies a checkpoint. The parameter set is checked against
/// the network built from the embedded config.
pub fn from_bytes(bytes: &[u8]) -> Result<(ModelConfig, ModelParams<f32>)> {
    if bytes.len() < MAGIC.len() + 4 + DIGEST_LEN {
        return Err(Error::Checkpoint(format!("file too short ({} bytes)", bytes.len())));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Checkpoint("bad magic, not a checkpoint file".into()));
    }
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checkpoint("checksum mismatch, file is corrupted".into()));
    }
    let mut r = Reader { buf: body, pos: MAGIC.len() };
    let version = r.u32("version")?;
    if version != VERSION as usize {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let n = r.u32("config length")?;
    let config: ModelConfig = serde_json::from_slice(r.take(n, "config")?)
        .map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
    config.validate().map_err(|e| Error::Checkpoint(format!("embedded config is invalid: {e}")))?;

    let count = r.u32("tensor count")?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let n = r.u32("name length")?;
        let name = std::str::from_utf8(r.take(n, "name")?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_owned();
        let rank = r.u32("rank")?;
        let shape = (0..rank).map(|_| r.u32("dims")).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let raw = r.take(numel.and_then(|n| n.checked_mul(4)).unwrap_or(usize::MAX), "values")?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        let t = Tensor::new(&shape, data).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor `{name}`")));
        }
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes before digest", body.len() - r.pos)));
    }
    let params = ModelParams::from_map(tensors);
    params.check_against(&param_specs(&config))?;
    Ok((config, params))
}

pub fn save(path: &Path, config: &ModelConfig, params: &ModelParams<f32>) -> Result<()> {
    let bytes = to_bytes(config, params)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(ModelConfig, ModelParams<f32>)> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    from_bytes(&bytes)
}

/// Loads a checkpoint and requires its config to equal `expected`.
pub fn load_matching(path: &Path, expected: &ModelConfig) -> Result<ModelParams<f32>> {
    let (config, params) = load(path)?;
    if &config != expected {
        return Err(Error::Checkpoint(format!(
            "checkpoint was written for a different model configuration ({})",
            describe_mismatch(&config, expected)
        )));
    }
    Ok(params)
}

fn describe_mismatch(a: &ModelConfig, b: &ModelConfig) -> String {
    let (Ok(serde_json::Value::Object(x)), Ok(serde_json::Value::Object(y))) =
        (serde_json::to_value(a), serde_json::to_value(b))
    else {
        return "unknown field".into();
    };
    x.iter()
        .filter(|(k, v)| y.get(*k) != Some(v))
        .map(|(k, v)| format!("{k}: checkpoint {v}, requested {}", y.get(k).cloned().unwrap_or_default()))
        .collect::<Vec<_>>()
        .join("; ")
}
