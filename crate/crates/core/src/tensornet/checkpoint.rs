//! `PCK1` checkpoints: magic, u32 tensor count, then per tensor a u16 name
//! length, the UTF-8 name, a u8 rank, u32 dims and f32 data (all
//! little-endian), and finally the u32 hash of the model config.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::model::{Model, ModelConfig};
use super::params::ParamSet;
use super::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PCK1";

pub fn encode_checkpoint(params: &ParamSet<f32>, config_hash: u32) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + params.num_scalars() * 4);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &d in t.dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out.extend_from_slice(&config_hash.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(self.bytes.len() as u64, format!("truncated {what}"))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

/// Returns the parameters and the stored config hash.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ParamSet<f32>, u32)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::format(0, "bad checkpoint magic"));
    }
    let count = r.u32("tensor count")? as usize;
    let mut entries = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name_len = u16::from_le_bytes(r.take(2, "name length")?.try_into().unwrap()) as usize;
        let name_at = r.pos as u64;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::format(name_at, "tensor name is not UTF-8"))?
            .to_string();
        let rank = r.take(1, "rank")?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32("dims")? as usize);
        }
        let n: usize = dims.iter().product();
        let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::format(r.pos as u64, "tensor too large"))?, "tensor data")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.push((name, Tensor::new(dims, data)?));
    }
    let hash = r.u32("config hash")?;
    if r.pos != bytes.len() {
        return Err(Error::format(r.pos as u64, "trailing bytes after config hash"));
    }
    Ok((ParamSet::new(entries), hash))
}

pub fn save_checkpoint(model: &Model<f32>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_checkpoint(&model.params, model.config().hash()))?;
    Ok(())
}

/// Loads a checkpoint into a model of the given config, rejecting files
/// written for a different config.
pub fn load_checkpoint(path: impl AsRef<Path>, config: &ModelConfig) -> Result<Model<f32>> {
    let (params, hash) = decode_checkpoint(&fs::read(path)?)?;
    if hash != config.hash() {
        return Err(Error::Checkpoint(format!(
            "config hash mismatch: file has {hash:#010x}, model config is {:#010x}",
            config.hash()
        )));
    }
    Model::from_params(config.clone(), params).map_err(|e| Error::Checkpoint(e.to_string()))
}
