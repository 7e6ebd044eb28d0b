//! Checkpoint directories: `manifest.json` plus one raw tensor file per
//! parameter block and optimizer moment.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::fit::MetricRecord;
use super::problem::{ObjectiveKind, PosteriorMode, ProblemLayout, SynthesisProblem};
use crate::diffmath::{AdamState, ParamStore};
use crate::error::{DpmsError, Result};
use crate::tensor_io::{create_dir, read_json, read_tensor, write_json, write_tensor, TensorEntry};

pub const CHECKPOINT_SCHEMA: u32 = 1;

/// Release identifier recorded in every manifest.
pub const VERSION: &str = concat!("dpms-v", env!("CARGO_PKG_VERSION"));

/// Run context stored alongside the parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointInfo {
    pub epoch: usize,
    pub phase: String,
    pub history: Vec<MetricRecord>,
    /// Training ELBO of every iteration so far.
    pub trace: Vec<f64>,
    pub config: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamMeta {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<TensorEntry>,
    pub v: Vec<TensorEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub schema_version: u32,
    pub version: String,
    pub kind: ObjectiveKind,
    pub mode: PosteriorMode,
    pub epoch: usize,
    pub phase: String,
    pub history: Vec<MetricRecord>,
    pub trace: Vec<f64>,
    pub config: serde_json::Value,
    pub layout: ProblemLayout,
    pub tensors: Vec<TensorEntry>,
    pub frozen: Vec<String>,
    pub adam: Option<AdamMeta>,
}

/// Writes the problem's parameters (not its data) and the optimizer state.
pub fn save_checkpoint(problem: &SynthesisProblem, adam: &AdamState, info: &CheckpointInfo, dir: &Path) -> Result<CheckpointManifest> {
    create_dir(dir)?;
    let store = &problem.store;
    let mut tensors = Vec::with_capacity(store.len());
    let mut frozen = Vec::new();
    for (id, block) in store.blocks() {
        tensors.push(write_tensor(dir, id.index(), block.name(), block.values())?);
        if block.is_frozen() {
            frozen.push(block.name().to_string());
        }
    }
    let adam_meta = if adam.m.len() == store.len() {
        let mut m = Vec::with_capacity(adam.m.len());
        let mut v = Vec::with_capacity(adam.v.len());
        for (i, (block, (a, b))) in store.blocks().zip(adam.m.iter().zip(&adam.v)).enumerate() {
            let name = block.1.name();
            m.push(write_tensor(dir, store.len() + i, &format!("adam.m.{name}"), a)?);
            v.push(write_tensor(dir, 2 * store.len() + i, &format!("adam.v.{name}"), b)?);
        }
        Some(AdamMeta {
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            step: adam.step,
            m,
            v,
        })
    } else {
        None
    };
    let manifest = CheckpointManifest {
        schema_version: CHECKPOINT_SCHEMA,
        version: VERSION.to_string(),
        kind: problem.kind(),
        mode: problem.mode,
        epoch: info.epoch,
        phase: info.phase.clone(),
        history: info.history.clone(),
        trace: info.trace.clone(),
        config: info.config.clone(),
        layout: problem.layout.clone(),
        tensors,
        frozen,
        adam: adam_meta,
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// Reads a checkpoint back. Rebuild the problem with
/// [`SynthesisProblem::assemble`] and the dataset.
pub fn load_checkpoint(dir: &Path) -> Result<(ParamStore, AdamState, CheckpointManifest)> {
    let manifest: CheckpointManifest = read_json(&dir.join("manifest.json"))?;
    if manifest.schema_version != CHECKPOINT_SCHEMA {
        return Err(DpmsError::Config(format!(
            "checkpoint schema {} is not supported (expected {CHECKPOINT_SCHEMA})",
            manifest.schema_version
        )));
    }
    let mut store = ParamStore::new();
    for entry in &manifest.tensors {
        let id = store.add(entry.name.clone(), read_tensor(dir, entry)?)?;
        if manifest.frozen.contains(&entry.name) {
            store.set_frozen(id, true);
        }
    }
    let mut adam = AdamState::new(&store);
    if let Some(meta) = &manifest.adam {
        adam.beta1 = meta.beta1;
        adam.beta2 = meta.beta2;
        adam.eps = meta.eps;
        adam.step = meta.step;
        adam.m = meta.m.iter().map(|e| read_tensor(dir, e)).collect::<Result<_>>()?;
        adam.v = meta.v.iter().map(|e| read_tensor(dir, e)).collect::<Result<_>>()?;
    }
    Ok((store, adam, manifest))
}

/// Problem from a checkpoint and the instances it was trained on.
pub fn restore_problem(dir: &Path, data: Vec<super::problem::InstanceData>) -> Result<(SynthesisProblem, AdamState, CheckpointManifest)> {
    let (store, adam, manifest) = load_checkpoint(dir)?;
    let mut problem = SynthesisProblem::assemble(store, manifest.layout.clone(), data)?;
    problem.mode = manifest.mode;
    Ok((problem, adam, manifest))
}
