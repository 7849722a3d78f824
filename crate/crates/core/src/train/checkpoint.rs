use std::path::Path;

use serde::{Deserialize, Serialize};

use seld_autodiff::{Archive, ParamStore};

use crate::error::{Result, SeldError};
use crate::model::{CstFormer, ModelConfig};

const KIND: &str = "checkpoint";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub epoch: usize,
    pub loss: f64,
    pub seld_score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: String,
    pub model: ModelConfig,
    pub epoch: usize,
    pub seed: u64,
    pub history: Vec<HistoryEntry>,
}

/// Self-describing weights: model config, epoch and metric history in the
/// metadata, one archive entry per parameter (including batch-norm buffers).
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub store: ParamStore<f32>,
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let meta = serde_json::to_string(&self.meta).map_err(|e| SeldError::Format(e.to_string()))?;
        let mut ar = Archive::new(meta);
        for (_, p) in self.store.iter() {
            ar.push(p.name.clone(), p.value.clone());
        }
        Ok(ar.save(path)?)
    }

    /// Rebuilds the model from the stored config and loads every parameter.
    pub fn load(path: impl AsRef<Path>) -> Result<(CstFormer, Self)> {
        let path = path.as_ref();
        let ar = Archive::<f32>::load(path)?;
        let meta: CheckpointMeta = serde_json::from_str(&ar.meta).map_err(|e| SeldError::Format(format!("{}: {e}", path.display())))?;
        if meta.kind != KIND {
            return Err(SeldError::Format(format!("{}: not a checkpoint (kind `{}`)", path.display(), meta.kind)));
        }
        let (model, mut store) = CstFormer::init(&meta.model, 0)?;
        if ar.entries.len() != store.len() {
            return Err(SeldError::Format(format!(
                "{}: {} tensors stored, model has {}",
                path.display(),
                ar.entries.len(),
                store.len()
            )));
        }
        for (_, p) in store.iter_mut() {
            let t = ar
                .get(&p.name)
                .ok_or_else(|| SeldError::Format(format!("{}: missing parameter `{}`", path.display(), p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(SeldError::Format(format!(
                    "{}: `{}` has shape {:?}, model expects {:?}",
                    path.display(),
                    p.name,
                    t.shape(),
                    p.value.shape()
                )));
            }
            p.value = t.clone();
        }
        Ok((model, Self { meta, store }))
    }

    pub fn new(model: &ModelConfig, store: &ParamStore<f32>, epoch: usize, seed: u64, history: Vec<HistoryEntry>) -> Self {
        let mut store = store.clone();
        store.zero_grads();
        Self {
            meta: CheckpointMeta {
                kind: KIND.into(),
                model: model.clone(),
                epoch,
                seed,
                history,
            },
            store,
        }
    }
}
