//! Checkpoint files: `BSICKPT1`, a little-endian u32 header length, a JSON
//! header (model config, training config, step, tensor index), then every
//! tensor as little-endian `f32` in index order.

use std::io::Write;
use std::path::Path;

use bisic_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, TrainConfig};
use crate::data::tmp_path;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::ParamStore;

pub const MAGIC: &[u8; 8] = b"BSICKPT1";

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CheckpointHeader {
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    /// Optimizer steps taken so far.
    pub step: usize,
    pub tensors: Vec<TensorEntry>,
}

pub struct Checkpoint {
    pub model: Model,
    pub train: Option<TrainConfig>,
    pub step: usize,
}

pub fn to_bytes(model: &Model, train: Option<&TrainConfig>, step: usize) -> Result<Vec<u8>> {
    let p = &model.params;
    let tensors = p.ids().map(|id| TensorEntry { name: p.name(id).to_string(), shape: p.get(id).shape().to_vec() }).collect();
    let header = CheckpointHeader { model: model.config.clone(), train: train.cloned(), step, tensors };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Other(format!("cannot serialize checkpoint header: {e}")))?;
    let mut out = Vec::with_capacity(12 + json.len() + 4 * p.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for id in p.ids() {
        for v in p.get(id).data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = bytes.get(12..12 + hlen).ok_or_else(|| Error::Format("checkpoint header truncated".into()))?;
    let header: CheckpointHeader =
        serde_json::from_slice(body).map_err(|e| Error::Format(format!("bad checkpoint header: {e}")))?;
    let mut pos = 12 + hlen;
    let mut store = ParamStore::default();
    for t in &header.tensors {
        let n: usize = t.shape.iter().product();
        let raw = bytes
            .get(pos..pos + 4 * n)
            .ok_or_else(|| Error::Format(format!("checkpoint data truncated in {}", t.name)))?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        store.add(&t.name, Tensor::from_vec(&t.shape, data));
        pos += 4 * n;
    }
    if pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes in checkpoint", bytes.len() - pos)));
    }
    let model = Model::with_params(header.model, store)?;
    Ok(Checkpoint { model, train: header.train, step: header.step })
}

/// Writes through a temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = tmp_path(path);
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).and_then(|_| f.sync_all()).map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save(path: &Path, model: &Model, train: Option<&TrainConfig>, step: usize) -> Result<()> {
    write_atomic(path, &to_bytes(model, train, step)?)
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bitwise() {
        let m = Model::new(ModelConfig::desk(), 4).unwrap();
        let bytes = to_bytes(&m, Some(&TrainConfig::default()), 7).unwrap();
        let c = from_bytes(&bytes).unwrap();
        assert_eq!(c.step, 7);
        assert_eq!(c.model.config, m.config);
        for id in m.params.ids() {
            assert_eq!(c.model.params.get(id).data(), m.params.get(id).data());
        }
        assert!(from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
