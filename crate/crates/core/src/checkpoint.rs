//! Checkpoint container: parameters, running statistics, optimizer moments
//! and JSON metadata in one keyed tensor archive.

use std::path::Path;

use serde::{Deserialize, Serialize};
use smag_tensor::{Tensor, TensorArchive};

use crate::error::{data, Result};
use crate::fsx::write_atomic;
use crate::model::{Model, ModelConfig};
use crate::optim::Adam;
use crate::train::ThresholdChoice;

pub const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: u32,
    pub model: ModelConfig,
    pub epoch: usize,
    pub best_val_loss: f64,
    pub threshold: Option<ThresholdChoice>,
}

pub fn to_archive(model: &Model<f32>, optimizer: Option<&Adam<f32>>, meta: &CheckpointMeta) -> Result<TensorArchive> {
    let mut a = TensorArchive::new(serde_json::to_value(meta)?);
    model.store.write_into(&mut a);
    if let Some(opt) = optimizer {
        for (i, name) in model.store.names().iter().enumerate() {
            a.insert(format!("adam.m.{name}"), &opt.m[i]);
            a.insert(format!("adam.v.{name}"), &opt.v[i]);
        }
        let scalars = [opt.step as f64, opt.lr, opt.weight_decay];
        a.insert("adam.state", &Tensor::<f64>::new(vec![3], scalars.to_vec())?);
    }
    Ok(a)
}

pub fn save_checkpoint(path: &Path, model: &Model<f32>, optimizer: Option<&Adam<f32>>, meta: &CheckpointMeta) -> Result<()> {
    write_atomic(path, &to_archive(model, optimizer, meta)?.to_bytes())
}

pub struct LoadedCheckpoint {
    pub model: Model<f32>,
    pub meta: CheckpointMeta,
    pub optimizer: Option<Adam<f32>>,
}

pub fn from_archive(a: &TensorArchive) -> Result<LoadedCheckpoint> {
    let meta: CheckpointMeta = serde_json::from_value(a.meta.clone())?;
    if meta.format != CHECKPOINT_FORMAT {
        return Err(data(format!("checkpoint format {} is not supported", meta.format)));
    }
    let mut model = Model::<f32>::new(meta.model.clone(), 0)?;
    let mut archived = TensorArchive::new(serde_json::Value::Null);
    for key in a.keys().filter(|k| !k.starts_with("adam.")) {
        archived.insert(key, &a.get::<f32>(key)?);
    }
    model.store.read_from(&archived)?;
    let optimizer = if a.contains("adam.state") {
        let state = a.get::<f64>("adam.state")?;
        let [step, lr, wd] = state.data() else {
            return Err(data("adam.state must hold 3 values"));
        };
        let mut opt = Adam::new(model.store.values(), *lr, *wd);
        opt.step = *step as u64;
        for (i, name) in model.store.names().iter().enumerate() {
            opt.m[i] = a.get(&format!("adam.m.{name}"))?;
            opt.v[i] = a.get(&format!("adam.v.{name}"))?;
        }
        Some(opt)
    } else {
        None
    };
    Ok(LoadedCheckpoint { model, meta, optimizer })
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    if !path.exists() {
        return Err(data(format!("checkpoint {} not found", path.display())));
    }
    from_archive(&TensorArchive::load(path)?)
}
