//! Checkpoint container: a small self-describing binary of named tensors
//! plus the JSON-encoded model configuration.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   8 bytes  "VSCKPT1\0"
//! dtype   4 bytes  "f32 " or "f64 "
//! cfg_len u32      followed by that many bytes of ModelConfig JSON
//! count   u32      number of tensors, then per tensor:
//!   name_len u16, name bytes, rank u8, dims u32 * rank, raw values
//! ```
//!
//! Values are written in native precision, so save/load round-trips are
//! bitwise exact.

use std::io::Write;
use std::path::Path;

use super::ModelState;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ParamMap};
use crate::tensor::{Scalar, Tensor};

const MAGIC: &[u8; 8] = b"VSCKPT1\0";

fn ck_err(reason: impl Into<String>) -> Error {
    Error::Checkpoint(reason.into())
}

pub fn save_checkpoint<T: Scalar>(model: &ModelState<T>, path: &Path) -> Result<()> {
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(MAGIC);
    let mut dtype = [b' '; 4];
    dtype[..T::DTYPE.len()].copy_from_slice(T::DTYPE.as_bytes());
    out.extend_from_slice(&dtype);
    let cfg = serde_json::to_vec(&model.config).map_err(|e| ck_err(format!("config encode: {e}")))?;
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(&cfg);
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (name, tensor) in model.params.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(tensor.rank() as u8);
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes_vec());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| ck_err("truncated checkpoint"))?;
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<ModelState<T>> {
    let bytes = std::fs::read(path).map_err(|_| Error::MissingFile(path.to_path_buf()))?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
    };
    if r.take(8)? != MAGIC {
        return Err(ck_err("bad magic (not a checkpoint, or wrong version)"));
    }
    let dtype = String::from_utf8_lossy(r.take(4)?).trim().to_string();
    if dtype != T::DTYPE {
        return Err(ck_err(format!(
            "precision mismatch: file is {dtype}, loader wants {}",
            T::DTYPE
        )));
    }
    let cfg_len = r.u32()? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(cfg_len)?)
        .map_err(|e| ck_err(format!("config decode: {e}")))?;
    config.validate()?;
    let count = r.u32()? as usize;
    let mut params = ParamMap::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| ck_err("non-utf8 parameter name"))?;
        let rank = r.take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * T::BYTES)?;
        let data: Vec<T> = raw
            .chunks_exact(T::BYTES)
            .map(|c| T::from_le_slice(c))
            .collect();
        params.insert(name, Tensor::var(data, &shape)?);
    }
    let state = ModelState { config, params };
    verify_against_config(&state)?;
    Ok(state)
}

/// Tensors must exactly match what the embedded config would create.
fn verify_against_config<T: Scalar>(state: &ModelState<T>) -> Result<()> {
    let fresh: ModelState<T> = ModelState::init(state.config.clone(), 0)?;
    if fresh.params.len() != state.params.len() {
        return Err(ck_err(format!(
            "config mismatch: expected {} tensors, found {}",
            fresh.params.len(),
            state.params.len()
        )));
    }
    for (name, t) in fresh.params.iter() {
        let loaded = state
            .params
            .get(name)
            .map_err(|_| ck_err(format!("config mismatch: missing tensor '{name}'")))?;
        if loaded.shape() != t.shape() {
            return Err(ck_err(format!(
                "config mismatch: '{name}' has shape {:?}, expected {:?}",
                loaded.shape(),
                t.shape()
            )));
        }
    }
    Ok(())
}
