//! Checkpoints are safetensors files. Parameters, buffers and optimizer
//! moments are f32 tensors; configs and counters live in the header metadata.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{Device, Tensor};
use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};
use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::error::{DaeError, Result};
use crate::networks::ModelConfig;

pub const FORMAT: &str = "dae-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

/// Counters needed to resume exactly where a run stopped.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: u64,
    pub epoch: u64,
    /// Batches of `epoch` already consumed.
    pub batch_in_epoch: u64,
    pub adam_t: u64,
    pub disc_adam_t: u64,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    pub state: TrainState,
    pub tensors: BTreeMap<String, Tensor>,
}

fn ckpt_err(e: impl std::fmt::Display) -> DaeError {
    DaeError::Checkpoint(e.to_string())
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut meta = HashMap::new();
    meta.insert("format".to_string(), FORMAT.to_string());
    meta.insert("version".to_string(), FORMAT_VERSION.to_string());
    meta.insert(
        "model_config".to_string(),
        serde_json::to_string(&ckpt.model)?,
    );
    meta.insert(
        "train_state".to_string(),
        serde_json::to_string(&ckpt.state)?,
    );
    if let Some(train) = &ckpt.train {
        meta.insert("train_config".to_string(), serde_json::to_string(train)?);
    }
    let mut blobs = Vec::with_capacity(ckpt.tensors.len());
    for (name, t) in &ckpt.tensors {
        let values = t
            .to_dtype(candle_core::DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?;
        let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        blobs.push((name.clone(), t.dims().to_vec(), bytes));
    }
    let views = blobs
        .iter()
        .map(|(n, shape, bytes)| {
            Ok((
                n.clone(),
                TensorView::new(Dtype::F32, shape.clone(), bytes).map_err(ckpt_err)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    // write then rename so an interrupted save never leaves a torn file
    let tmp = path.with_extension("tmp");
    safetensors::serialize_to_file(views, Some(meta), &tmp).map_err(ckpt_err)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Loads a checkpoint. With `expect`, a different model config is rejected.
pub fn load_checkpoint(path: &Path, expect: Option<&ModelConfig>) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(ckpt_err)?;
    let meta = header
        .metadata()
        .clone()
        .ok_or_else(|| DaeError::Checkpoint("checkpoint has no metadata".into()))?;
    let field = |k: &str| {
        meta.get(k)
            .ok_or_else(|| DaeError::Checkpoint(format!("metadata lacks `{k}`")))
    };
    if field("format")? != FORMAT {
        return Err(DaeError::Checkpoint(format!("not a {FORMAT} file")));
    }
    let version: u32 = field("version")?.parse().map_err(ckpt_err)?;
    if version != FORMAT_VERSION {
        return Err(DaeError::Checkpoint(format!(
            "checkpoint version {version} is not supported (expected {FORMAT_VERSION})"
        )));
    }
    let model: ModelConfig = serde_json::from_str(field("model_config")?)?;
    if let Some(expect) = expect {
        if *expect != model {
            return Err(DaeError::Checkpoint(
                "checkpoint was written for a different model config".into(),
            ));
        }
    }
    let state: TrainState = serde_json::from_str(field("train_state")?)?;
    let train = meta
        .get("train_config")
        .map(|s| serde_json::from_str(s))
        .transpose()?;
    let st = SafeTensors::deserialize(&bytes).map_err(ckpt_err)?;
    let mut tensors = BTreeMap::new();
    for (name, view) in st.tensors() {
        if view.dtype() != Dtype::F32 {
            return Err(DaeError::Checkpoint(format!("tensor `{name}` is not f32")));
        }
        let values: Vec<f32> = view
            .data()
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        tensors.insert(name, Tensor::from_vec(values, view.shape(), &Device::Cpu)?);
    }
    Ok(Checkpoint {
        model,
        train,
        state,
        tensors,
    })
}

/// Tensors under `prefix`, with the prefix removed.
pub fn section(tensors: &BTreeMap<String, Tensor>, prefix: &str) -> BTreeMap<String, Tensor> {
    tensors
        .iter()
        .filter_map(|(k, t)| k.strip_prefix(prefix).map(|r| (r.to_string(), t.clone())))
        .collect()
}
