//! Model checkpoints: a small header, the config as JSON, then every named
//! parameter as a matrix block in the feature-file encoding (`f64`).
//!
//! ```text
//! "TACK" | u16 version | u16 reserved | u32 json_len | json
//! u32 count, then per tensor:
//!   u16 name_len | name | u8 frozen | u8 rank | rank × u64 dims | matrix block
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{decode_matrix, encode_matrix, DType, Matrix};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TACK";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub epoch: usize,
    pub step: u64,
    pub seed: u64,
    pub param_hash: String,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Data(format!("corrupt checkpoint: {}", msg.into()))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(corrupt(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn encode(model: &Model, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    let json = serde_json::to_vec(meta)?;
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(model.store.len() as u32).to_le_bytes());
    for (_, p) in model.store.iter() {
        out.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(p.frozen as u8);
        out.push(p.value.rank() as u8);
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        let cols = p.value.last_dim();
        let m = Matrix {
            rows: p.value.numel() / cols,
            cols,
            data: p.value.data().to_vec(),
        };
        out.extend(encode_matrix(&m, DType::F64)?);
    }
    Ok(out)
}

/// Rebuilds the model from the embedded config, then overwrites every
/// parameter; names, shapes and frozen flags must all match.
pub fn decode(bytes: &[u8]) -> Result<(Model, CheckpointMeta)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = r.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    r.u16()?;
    let json_len = r.u32()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(json_len)?)?;
    let mut model = Model::new(&meta.model, 0)?;
    let count = r.u32()? as usize;
    if count != model.store.len() {
        return Err(corrupt(format!("{count} tensors, model has {}", model.store.len())));
    }
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| corrupt("non-UTF-8 name"))?;
        let frozen = r.u8()? != 0;
        let rank = r.u8()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let (m, _, used) = decode_matrix(&bytes[r.pos..])?;
        r.pos += used;
        let id = model
            .store
            .find(&name)
            .ok_or_else(|| corrupt(format!("unknown parameter {name}")))?;
        let p = model.store.get(id);
        if p.value.shape() != shape.as_slice() || p.frozen != frozen {
            return Err(corrupt(format!(
                "parameter {name}: stored {shape:?} (frozen {frozen}), expected {:?} (frozen {})",
                p.value.shape(),
                p.frozen
            )));
        }
        *model.store.value_mut(id) = Tensor::new(shape, m.data)?;
    }
    if r.pos != bytes.len() {
        return Err(corrupt("trailing bytes"));
    }
    Ok((model, meta))
}

pub fn save(model: &Model, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, encode(model, meta)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(Model, CheckpointMeta)> {
    decode(&fs::read(path)?)
}
