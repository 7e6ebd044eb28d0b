//! Datasets on disk: `dataset.json` plus one directory of raw tensors per
//! instance, in the same format as checkpoints.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{DpmsError, Result};
use crate::tensor_io::{create_dir, read_json, read_tensor, write_json, write_tensor, TensorEntry};

pub const DATASET_SCHEMA: u32 = 1;
pub const DATASET_FILE: &str = "dataset.json";

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetInstance {
    pub name: String,
    pub meta: serde_json::Value,
    pub tensors: BTreeMap<String, Array2<f64>>,
}

impl DatasetInstance {
    pub fn new(name: &str, meta: serde_json::Value) -> Self {
        Self {
            name: name.to_string(),
            meta,
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<f64>) {
        self.tensors.insert(name.into(), value);
    }

    pub fn tensor(&self, name: &str) -> Result<&Array2<f64>> {
        self.tensors
            .get(name)
            .ok_or_else(|| DpmsError::Invalid(format!("instance {} has no tensor {name:?}", self.name)))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub experiment: String,
    pub seed: u64,
    pub meta: serde_json::Value,
    pub instances: Vec<DatasetInstance>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceManifest {
    name: String,
    dir: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetManifest {
    schema_version: u32,
    experiment: String,
    seed: u64,
    meta: serde_json::Value,
    instances: Vec<InstanceManifest>,
}

impl Dataset {
    pub fn expect_experiment(&self, name: &str) -> Result<()> {
        if self.experiment != name {
            return Err(DpmsError::Invalid(format!("dataset holds {:?}, expected {name:?}", self.experiment)));
        }
        Ok(())
    }

    pub fn instance(&self, name: &str) -> Result<&DatasetInstance> {
        self.instances
            .iter()
            .find(|i| i.name == name)
            .ok_or_else(|| DpmsError::Invalid(format!("dataset has no instance {name:?}")))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        create_dir(dir)?;
        let mut instances = Vec::with_capacity(self.instances.len());
        for (k, inst) in self.instances.iter().enumerate() {
            let sub = format!("{k:04}-{}", inst.name);
            let path = dir.join(&sub);
            create_dir(&path)?;
            let tensors = inst
                .tensors
                .iter()
                .enumerate()
                .map(|(i, (name, v))| write_tensor(&path, i, name, v))
                .collect::<Result<Vec<_>>>()?;
            instances.push(InstanceManifest {
                name: inst.name.clone(),
                dir: sub,
                meta: inst.meta.clone(),
                tensors,
            });
        }
        let manifest = DatasetManifest {
            schema_version: DATASET_SCHEMA,
            experiment: self.experiment.clone(),
            seed: self.seed,
            meta: self.meta.clone(),
            instances,
        };
        write_json(&dir.join(DATASET_FILE), &manifest)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: DatasetManifest = read_json(&dir.join(DATASET_FILE))?;
        if manifest.schema_version != DATASET_SCHEMA {
            return Err(DpmsError::Invalid(format!(
                "dataset schema {} is not supported (expected {DATASET_SCHEMA})",
                manifest.schema_version
            )));
        }
        let instances = manifest
            .instances
            .into_iter()
            .map(|m| {
                let path = dir.join(&m.dir);
                let tensors = m
                    .tensors
                    .iter()
                    .map(|e| Ok((e.name.clone(), read_tensor(&path, e)?)))
                    .collect::<Result<BTreeMap<_, _>>>()?;
                Ok(DatasetInstance {
                    name: m.name,
                    meta: m.meta,
                    tensors,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            experiment: manifest.experiment,
            seed: manifest.seed,
            meta: manifest.meta,
            instances,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{gen_sim_brain, ScaleSpec, SimBrain, SimBrainSpec};

    #[test]
    fn round_trip_is_exact() {
        let scale = ScaleSpec {
            neurons: 0.003,
            samples: 0.005,
            instances: 0.03,
        };
        let brain = gen_sim_brain(&SimBrainSpec::default(), &scale, 4).unwrap();
        let ds = brain.to_dataset().unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back, ds);
        let again = SimBrain::from_dataset(&back).unwrap();
        assert_eq!(again.instances, brain.instances);
        assert_eq!(again.cpd, brain.cpd);
    }
}
