//! Checkpoint container: `manifest.json` (configuration plus one
//! `{name, shape, offset, dtype}` entry per parameter, offsets counted in
//! values) and `params.f32`, all parameters as contiguous little-endian
//! `f32` in manifest order.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::blob::{decode_f32, encode_f32};
use crate::config::StackConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::StackModel;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "params.f32";
const FORMAT: &str = "dln-checkpoint";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub dtype: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub config: StackConfig,
    pub params: Vec<TensorEntry>,
}

pub fn manifest(model: &StackModel) -> CheckpointManifest {
    let mut offset = 0;
    let params = model
        .params()
        .iter()
        .map(|(name, t)| {
            let entry = TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset,
                dtype: "f32".into(),
            };
            offset += t.len();
            entry
        })
        .collect();
    CheckpointManifest {
        format: FORMAT.into(),
        version: 1,
        config: model.config().clone(),
        params,
    }
}

pub fn save(model: &StackModel, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let text = serde_json::to_string_pretty(&manifest(model))?;
    fs::write(dir.join(MANIFEST_FILE), text + "\n")?;
    let blob = encode_f32(model.params().tensors().iter().flat_map(|t| t.data().iter().copied()));
    fs::write(dir.join(BLOB_FILE), blob)?;
    Ok(())
}

pub fn load(dir: &Path) -> Result<StackModel> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| Error::CorruptContainer(format!("manifest: {e}")))?;
    if manifest.format != FORMAT {
        return Err(Error::CorruptContainer(format!("unknown format {:?}", manifest.format)));
    }
    let blob = fs::read(dir.join(BLOB_FILE))?;
    let mut named = HashMap::with_capacity(manifest.params.len());
    for entry in &manifest.params {
        if entry.dtype != "f32" {
            return Err(Error::CorruptContainer(format!("{}: unsupported dtype {}", entry.name, entry.dtype)));
        }
        let len = entry.shape.iter().product();
        let data = decode_f32(&blob, entry.offset, len, &entry.name)?;
        let t = Tensor::new(entry.shape.clone(), data)
            .map_err(|e| Error::CorruptContainer(format!("{}: {e}", entry.name)))?;
        if named.insert(entry.name.clone(), t).is_some() {
            return Err(Error::CorruptContainer(format!("duplicate parameter {}", entry.name)));
        }
    }
    StackModel::from_named(manifest.config, named)
}
