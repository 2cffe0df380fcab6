//! Binary checkpoint: magic, version, a JSON manifest, then the parameter
//! values as little-endian `f32` in manifest order.

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FusionModel, ModelConfig, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const MAGIC: &[u8; 8] = b"CIRKCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub config: ModelConfig,
    pub seed: u64,
    pub tensors: Vec<TensorEntry>,
    /// Free-form training metadata (step, validation score).
    #[serde(default)]
    pub extra: serde_json::Value,
}

/// Serializes a model. Values are stored as `f32`, so an `f32` model
/// round-trips bit-exactly.
pub fn write_checkpoint<S: Scalar>(model: &FusionModel<S>, extra: serde_json::Value) -> Result<Vec<u8>> {
    let manifest = CheckpointManifest {
        config: model.config().clone(),
        seed: model.seed(),
        tensors: model
            .params()
            .iter()
            .map(|p| TensorEntry {
                name: p.name.clone(),
                rows: p.value.rows,
                cols: p.value.cols,
            })
            .collect(),
        extra,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(20 + json.len() + 4 * model.params().count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for p in model.params().iter() {
        for &v in &p.value.data {
            out.extend_from_slice(&v.as_f32().to_le_bytes());
        }
    }
    Ok(out)
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Checkpoint(format!("truncated checkpoint while reading {what}")));
    }
    let (head, tail) = bytes.split_at(n);
    *bytes = tail;
    Ok(head)
}

/// Parses a checkpoint, validating the layout against a freshly built model.
pub fn read_checkpoint<S: Scalar>(mut bytes: &[u8]) -> Result<(FusionModel<S>, CheckpointManifest)> {
    let b = &mut bytes;
    if take(b, 8, "magic")? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(take(b, 4, "version")?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let len = u64::from_le_bytes(take(b, 8, "manifest length")?.try_into().unwrap());
    let len = usize::try_from(len).map_err(|_| Error::Checkpoint("manifest too large".into()))?;
    let manifest: CheckpointManifest = serde_json::from_slice(take(b, len, "manifest")?)
        .map_err(|e| Error::Checkpoint(format!("bad manifest: {e}")))?;
    let template = FusionModel::<S>::new(manifest.config.clone(), manifest.seed)?;
    if template.params().len() != manifest.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "manifest lists {} tensors, model has {}",
            manifest.tensors.len(),
            template.params().len()
        )));
    }
    let mut store = ParamStore::new();
    for (p, e) in template.params().iter().zip(&manifest.tensors) {
        if p.name != e.name || p.value.shape() != (e.rows, e.cols) {
            return Err(Error::Checkpoint(format!(
                "tensor `{}` {}x{} does not match expected `{}` {:?}",
                e.name,
                e.rows,
                e.cols,
                p.name,
                p.value.shape()
            )));
        }
        let raw = take(b, 4 * e.rows * e.cols, &e.name)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| <S as Scalar>::from_f32(f32::from_le_bytes(c.try_into().unwrap())))
            .collect();
        store.add(e.name.clone(), p.group, Tensor::from_vec(e.rows, e.cols, data));
    }
    if !b.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes after tensor data", b.len())));
    }
    Ok((template.with_params(store)?, manifest))
}

pub fn save_checkpoint<S: Scalar>(path: &Path, model: &FusionModel<S>, extra: serde_json::Value) -> Result<()> {
    crate::io::write_atomic(path, &write_checkpoint(model, extra)?)
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<(FusionModel<S>, CheckpointManifest)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes)
}
