use serde::{Deserialize, Serialize};

use super::seeded;
use crate::diffmath::AdamState;
use crate::engine::{fit, FitOutcome, InstanceData, LinearSetup, LrSchedule, PosteriorFamily, SynthesisProblem, TrainConfig};
use crate::error::Result;
use crate::shbf::GridLayout;
use crate::synthgen::{gen_linear_one_sample, LinearOneSample, LINEAR_NOISE_STD, LINEAR_TRUE_MEAN};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinearFit {
    pub cpd_mean: f64,
    pub cpd_sigma: f64,
    pub posterior_sigma: f64,
    pub train: TrainConfig,
}

impl Default for LinearFit {
    fn default() -> Self {
        let mut train = TrainConfig::new(1500, LrSchedule::constant(0.05), 0);
        train.batch_fraction = 1.0;
        train.checkpoint_every = 1500;
        Self {
            cpd_mean: 0.0,
            cpd_sigma: 1.0,
            posterior_sigma: 1.0,
            train,
        }
    }
}

/// Single tile: every instance shares one property value.
pub fn one_tile_layout() -> Result<GridLayout> {
    GridLayout::uniform(&[0.0], &[1.0], &[1], 0.0)
}

pub fn build_problem(data: &LinearOneSample, cfg: &LinearFit) -> Result<SynthesisProblem> {
    let instances = data
        .instances
        .iter()
        .map(|s| InstanceData {
            name: s.name.clone(),
            x: s.x.clone(),
            y: Some(s.y.clone()),
            props: LinearOneSample::props(),
        })
        .collect();
    let setup = LinearSetup {
        layout: one_tile_layout()?,
        columns: LINEAR_TRUE_MEAN.len(),
        noise_std: LINEAR_NOISE_STD,
        posterior: PosteriorFamily::FullCov,
        cpd_mean: cfg.cpd_mean,
        cpd_sigma: cfg.cpd_sigma,
        posterior_sigma: cfg.posterior_sigma,
    };
    SynthesisProblem::linear(instances, &setup)
}

/// Learned CPD summary against the ground truth `N(μ, I)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearCpdFit {
    pub instances: usize,
    pub mean: Vec<f64>,
    pub variances: Vec<f64>,
    pub mean_rmse: f64,
    pub variance_rmse: f64,
    /// Geometric mean of the learned variances.
    pub variance_geomean: f64,
}

pub fn summarize(problem: &SynthesisProblem) -> Result<LinearCpdFit> {
    let (mean, std) = problem.layout.weight_cpd.at(&problem.store, &LinearOneSample::props())?;
    let mean = mean.row(0).to_vec();
    let variances: Vec<f64> = std.row(0).iter().map(|s| s * s).collect();
    let m = mean.len() as f64;
    let mean_rmse = (mean.iter().zip(LINEAR_TRUE_MEAN).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / m).sqrt();
    let variance_rmse = (variances.iter().map(|v| (v - 1.0).powi(2)).sum::<f64>() / m).sqrt();
    let variance_geomean = (variances.iter().map(|v| v.ln()).sum::<f64>() / m).exp();
    Ok(LinearCpdFit {
        instances: problem.len(),
        mean,
        variances,
        mean_rmse,
        variance_rmse,
        variance_geomean,
    })
}

pub fn fit_problem(problem: &mut SynthesisProblem, cfg: &LinearFit, seed: u64) -> Result<FitOutcome> {
    let mut adam = AdamState::new(&problem.store);
    fit(problem, &mut adam, &seeded(&cfg.train, seed), 0, None)
}

/// Generates `instances` systems, fits the CPD and summarizes it.
pub fn simulate(instances: usize, seed: u64, cfg: &LinearFit) -> Result<LinearCpdFit> {
    let data = gen_linear_one_sample(instances, seed);
    let mut problem = build_problem(&data, cfg)?;
    fit_problem(&mut problem, cfg, seed)?;
    summarize(&problem)
}
