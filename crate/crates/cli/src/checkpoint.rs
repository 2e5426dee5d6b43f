//! JSON model checkpoints: the architecture plus every stored tensor.
//!
//! Values are written with shortest round-trip formatting, so a
//! save/load/save cycle reproduces every `f64` bit for bit.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use whvi::models::{ModelSpec, Regressor};
use whvi::train::{rng_for, INIT_STREAM};
use whvi::TensorError;

pub const FORMAT: &str = "whvi-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid checkpoint: {0}")]
    Format(String),
    #[error("tensor `{name}`: checkpoint has shape {found:?}, model expects {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("tensor `{name}` is missing from the checkpoint")]
    Missing { name: String },
    #[error("checkpoint tensor `{name}` has no counterpart in the model")]
    Unexpected { name: String },
    #[error(transparent)]
    Model(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    /// Seed whose split and training produced the parameters.
    pub seed: Option<u64>,
    pub model: ModelSpec,
    pub tensors: Vec<TensorRecord>,
}

impl Checkpoint {
    pub fn capture(model: &dyn Regressor, seed: Option<u64>) -> Self {
        let tensors = model
            .store()
            .entries()
            .iter()
            .map(|e| TensorRecord {
                name: e.name.clone(),
                shape: e.value.shape().to_vec(),
                trainable: e.trainable,
                data: e.value.data().to_vec(),
            })
            .collect();
        Self {
            format: FORMAT.into(),
            version: VERSION,
            seed,
            model: model.spec(),
            tensors,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, CheckpointError> {
        let ckpt: Self = serde_json::from_str(text).map_err(|e| CheckpointError::Format(e.to_string()))?;
        if ckpt.format != FORMAT || ckpt.version != VERSION {
            return Err(CheckpointError::Format(format!(
                "expected {FORMAT} v{VERSION}, found {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        for t in &ckpt.tensors {
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(CheckpointError::Format(format!(
                    "tensor `{}` has {} values for shape {:?}",
                    t.name,
                    t.data.len(),
                    t.shape
                )));
            }
        }
        Ok(ckpt)
    }

    /// Copies the stored tensors into `model`, which must have exactly the
    /// same tensor names and shapes.
    pub fn restore_into(&self, model: &mut dyn Regressor) -> Result<(), CheckpointError> {
        let store = model.store();
        for t in &self.tensors {
            if store.find(&t.name).is_none() {
                return Err(CheckpointError::Unexpected { name: t.name.clone() });
            }
        }
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let name = model.store().name(id).to_string();
            let record = self
                .tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| CheckpointError::Missing { name: name.clone() })?;
            let target = model.store_mut().get_mut(id);
            if target.shape() != record.shape.as_slice() {
                return Err(CheckpointError::ShapeMismatch {
                    name,
                    expected: target.shape().to_vec(),
                    found: record.shape.clone(),
                });
            }
            target.data_mut().copy_from_slice(&record.data);
        }
        Ok(())
    }

    /// Rebuilds the model described by the checkpoint.
    pub fn into_model(&self) -> Result<Box<dyn Regressor>, CheckpointError> {
        let mut model = self.model.build(&mut rng_for(0, INIT_STREAM))?;
        self.restore_into(model.as_mut())?;
        Ok(model)
    }
}

pub fn checkpoint_save(model: &dyn Regressor, seed: Option<u64>, path: &Path) -> Result<(), CheckpointError> {
    std::fs::write(path, Checkpoint::capture(model, seed).to_json()).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn checkpoint_read(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let text = std::fs::read_to_string(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Checkpoint::from_json(&text)
}

pub fn checkpoint_load(path: &Path) -> Result<Box<dyn Regressor>, CheckpointError> {
    checkpoint_read(path)?.into_model()
}
