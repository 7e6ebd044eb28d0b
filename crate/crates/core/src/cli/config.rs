use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{DpmsError, Result};
use crate::experiments::fa::{Assignment, FaFit};
use crate::experiments::linear::LinearFit;
use crate::experiments::sim_brain::SimBrainFit;
use crate::synthgen::{FaSpec, ScaleSpec, SimBrainSpec};
use crate::tensor_io::read_json;

pub const RUN_CONFIG_SCHEMA: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    SimBrain,
    LinearOneSample,
    FaDbSb,
}

impl Experiment {
    pub fn name(&self) -> &'static str {
        match self {
            Experiment::SimBrain => "sim-brain",
            Experiment::LinearOneSample => "linear-one-sample",
            Experiment::FaDbSb => "fa-db-sb",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinearRun {
    pub instances: usize,
    pub fit: LinearFit,
}

impl Default for LinearRun {
    fn default() -> Self {
        Self {
            instances: 10,
            fit: LinearFit::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FaRun {
    pub assignment: Assignment,
    /// Instance whose regime the same-behavior assignment uses and whose
    /// off-regime data is evaluated.
    pub target: usize,
    pub fit: FaFit,
}

impl Default for FaRun {
    fn default() -> Self {
        Self {
            assignment: Assignment::DifferentBehavior,
            target: 0,
            fit: FaFit::default(),
        }
    }
}

/// Everything a run depends on. Written next to every output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub experiment: Experiment,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Defaults to desk scale for sim-brain and full scale otherwise.
    #[serde(default)]
    pub scale: Option<ScaleSpec>,
    #[serde(default)]
    pub sim_brain: SimBrainSpec,
    #[serde(default)]
    pub sim_brain_fit: SimBrainFit,
    #[serde(default)]
    pub linear: LinearRun,
    #[serde(default)]
    pub fa: FaSpec,
    #[serde(default)]
    pub fa_run: FaRun,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

impl RunConfig {
    pub fn new(experiment: Experiment) -> Self {
        Self {
            schema_version: RUN_CONFIG_SCHEMA,
            experiment,
            seed: None,
            scale: None,
            sim_brain: SimBrainSpec::default(),
            sim_brain_fit: SimBrainFit::default(),
            linear: LinearRun::default(),
            fa: FaSpec::default(),
            fa_run: FaRun::default(),
            output: None,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: RunConfig = read_json(path).map_err(|e| DpmsError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != RUN_CONFIG_SCHEMA {
            return Err(DpmsError::Config(format!(
                "schema_version {} is not supported (expected {RUN_CONFIG_SCHEMA})",
                self.schema_version
            )));
        }
        self.scale().validate()?;
        self.sim_brain_fit.pin.validate()?;
        self.sim_brain_fit.train.validate()?;
        self.linear.fit.train.validate()?;
        self.fa_run.fit.pin.validate()?;
        self.fa_run.fit.train.validate()?;
        self.fa.validate()?;
        Ok(())
    }

    pub fn scale(&self) -> ScaleSpec {
        self.scale.unwrap_or(match self.experiment {
            Experiment::SimBrain => ScaleSpec::default(),
            _ => ScaleSpec::FULL,
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_named() {
        let text = r#"{ "schema_version": 1, "experiment": "sim-brain", "sede": 3 }"#;
        let err = serde_json::from_str::<RunConfig>(text).unwrap_err().to_string();
        assert!(err.contains("sede"), "{err}");
        let nested = r#"{ "schema_version": 1, "experiment": "fa-db-sb", "fa": { "latents": 3 } }"#;
        let err = serde_json::from_str::<RunConfig>(nested).unwrap_err().to_string();
        assert!(err.contains("latents"), "{err}");
    }

    #[test]
    fn defaults_round_trip() {
        for e in [Experiment::SimBrain, Experiment::LinearOneSample, Experiment::FaDbSb] {
            let cfg = RunConfig::new(e);
            let text = serde_json::to_string(&cfg).unwrap();
            let back: RunConfig = serde_json::from_str(&text).unwrap();
            assert_eq!(back, cfg);
            back.validate().unwrap();
        }
    }

    #[test]
    fn wrong_schema_is_rejected() {
        let mut cfg = RunConfig::new(Experiment::SimBrain);
        cfg.schema_version = 2;
        assert!(cfg.validate().is_err());
    }
}
