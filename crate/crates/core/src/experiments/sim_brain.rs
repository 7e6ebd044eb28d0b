use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::seeded;
use crate::diffmath::AdamState;
use crate::engine::rng::{derive_seed, stream, Purpose};
use crate::engine::{
    constrained_posterior_init, eval_test_elbo, fit, mean_r2, predict_mean, EarlyStop, FitOutcome, InstanceData,
    InstanceTest, LrSchedule, RegressionInit, RegressionSetup, SynthesisProblem, TrainConfig,
};
use crate::error::{DpmsError, Result};
use crate::eval::{identifiability_scale, pearson_slice, r_squared, InstanceMetrics, MetricReport};
use crate::shbf::GridLayout;
use crate::synthgen::{SimBrain, SimInstance, Split};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimBrainFit {
    /// Tiles per property dimension.
    pub tiles: usize,
    pub overlap: f64,
    pub input_scale: f64,
    pub init: RegressionInit,
    /// Constrained posterior initialization phase.
    pub pin: TrainConfig,
    pub train: TrainConfig,
    /// Posterior draws for test-set ELBOs.
    pub eval_samples: usize,
}

impl Default for SimBrainFit {
    fn default() -> Self {
        let mut train = TrainConfig::new(3000, LrSchedule::step_decay(0.1, 10.0, 1000, 3000), 0);
        train.early_stop = EarlyStop::R2;
        Self {
            tiles: 100,
            overlap: 0.5,
            input_scale: 0.001,
            init: RegressionInit::default(),
            pin: TrainConfig::new(500, LrSchedule::constant(0.01), 0),
            train,
            eval_samples: 1000,
        }
    }
}

impl SimBrainFit {
    pub fn layout(&self) -> Result<GridLayout> {
        GridLayout::uniform(&[0.0, 0.0], &[1.0, 1.0], &[self.tiles, self.tiles], self.overlap)
    }
}

pub fn training_data(inst: &SimInstance) -> InstanceData {
    InstanceData {
        name: inst.name.clone(),
        x: inst.train.x.clone(),
        y: Some(inst.train.y.clone()),
        props: inst.props.clone(),
    }
}

fn as_test(split: &Split) -> InstanceTest {
    InstanceTest {
        x: split.x.clone(),
        y: Some(split.y.clone()),
    }
}

pub fn split_of<'a>(inst: &'a SimInstance, name: &str) -> Result<&'a Split> {
    match name {
        "train" => Ok(&inst.train),
        "validation" => Ok(&inst.validation),
        "test" => Ok(&inst.test),
        "ood" => Ok(&inst.ood),
        other => Err(DpmsError::Invalid(format!("unknown sim-brain split {other:?}"))),
    }
}

/// Regression problem over the chosen instances.
pub fn build_problem(brain: &SimBrain, indices: &[usize], cfg: &SimBrainFit, seed: u64) -> Result<SynthesisProblem> {
    let data = indices.iter().map(|&i| training_data(&brain.instances[i])).collect();
    let setup = RegressionSetup {
        layout: cfg.layout()?,
        low_dim: 1,
        outputs: 1,
        input_scale: cfg.input_scale,
        init: cfg.init.clone(),
    };
    let mut rng = stream(seed, 0, 0, 0, Purpose::Init);
    SynthesisProblem::regression(data, &setup, &mut rng)
}

fn find<'a>(brain: &'a SimBrain, name: &str) -> Result<&'a SimInstance> {
    brain
        .instances
        .iter()
        .find(|i| i.name == name)
        .ok_or_else(|| DpmsError::Invalid(format!("no generated instance {name}")))
}

/// Validation split of every instance in `problem`, in problem order.
pub fn validation_tests(problem: &SynthesisProblem, brain: &SimBrain) -> Result<Vec<InstanceTest>> {
    problem.data.iter().map(|d| Ok(as_test(&find(brain, &d.name)?.validation))).collect()
}

/// Constrained initialization followed by synthesis with early stopping on
/// mean validation R².
pub fn fit_problem(
    problem: &mut SynthesisProblem,
    brain: &SimBrain,
    cfg: &SimBrainFit,
    seed: u64,
    checkpoint_dir: Option<&Path>,
) -> Result<(FitOutcome, FitOutcome, AdamState)> {
    let validation = validation_tests(problem, brain)?;
    let pin = constrained_posterior_init(problem, &seeded(&cfg.pin, derive_seed(seed, &[1])))?;
    let mut train = seeded(&cfg.train, derive_seed(seed, &[2]));
    train.checkpoint_dir = checkpoint_dir.map(Path::to_path_buf);
    let mut adam = AdamState::new(&problem.store);
    let metric = |p: &SynthesisProblem| mean_r2(p, &validation);
    let use_metric = train.early_stop != EarlyStop::None;
    let outcome = fit(problem, &mut adam, &train, 0, use_metric.then_some(&metric as _))?;
    Ok((pin, outcome, adam))
}

/// Problem restricted to one instance and fitted on its own.
pub fn fit_isolated(brain: &SimBrain, index: usize, cfg: &SimBrainFit, seed: u64) -> Result<SynthesisProblem> {
    let mut p = build_problem(brain, &[index], cfg, seed)?;
    fit_problem(&mut p, brain, cfg, seed, None)?;
    Ok(p)
}

/// One isolated fit per instance, in parallel.
pub fn fit_all_isolated(brain: &SimBrain, cfg: &SimBrainFit, seed: u64) -> Result<Vec<SynthesisProblem>> {
    (0..brain.instances.len())
        .into_par_iter()
        .map(|i| fit_isolated(brain, i, cfg, seed))
        .collect()
}

/// R², correlation and (optionally) test ELBO per instance of `problem` and split.
pub fn report(
    problem: &SynthesisProblem,
    brain: &SimBrain,
    splits: &[&str],
    elbo_samples: Option<usize>,
    seed: u64,
) -> Result<Vec<InstanceMetrics>> {
    let mut rows = Vec::new();
    for split in splits {
        let tests: Vec<InstanceTest> = problem
            .data
            .iter()
            .map(|d| Ok(as_test(split_of(find(brain, &d.name)?, split)?)))
            .collect::<Result<_>>()?;
        let elbos = match elbo_samples {
            Some(n) => Some(eval_test_elbo(problem, &tests, None, n, seed)?),
            None => None,
        };
        for (s, t) in tests.iter().enumerate() {
            let pred = predict_mean(problem, s, &t.x)?;
            let y = t.y.as_ref().expect("regression targets");
            rows.push(InstanceMetrics {
                instance: problem.data[s].name.clone(),
                split: split.to_string(),
                elbo: elbos.as_ref().map(|e| e[s].elbo),
                normalized_elbo: elbos.as_ref().map(|e| e[s].normalized),
                r2: Some(r_squared(y, &pred)?),
                corr: Some(pearson_slice(y.as_slice().expect("contiguous"), pred.as_slice().expect("contiguous"))),
            });
        }
    }
    Ok(rows)
}

pub fn metric_report(rows: Vec<InstanceMetrics>) -> MetricReport {
    MetricReport::new(SimBrain::EXPERIMENT, rows)
}

/// Points of an `n × n` lattice on the unit square.
pub fn property_grid(n: usize) -> Array2<f64> {
    let step = 1.0 / (n - 1).max(1) as f64;
    Array2::from_shape_fn((n * n, 2), |(i, d)| if d == 0 { (i / n) as f64 * step } else { (i % n) as f64 * step })
}

/// Comparison of the learned CPD mean with the ground truth on a grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanFieldMatch {
    /// Least-squares scale applied to the learned mean.
    pub k: f64,
    pub pearson: f64,
    pub rmse: f64,
}

/// `mask` restricts the comparison (and the fit of `k`) to some grid points.
pub fn learned_mean_match(problem: &SynthesisProblem, brain: &SimBrain, grid: &Array2<f64>, mask: Option<&[bool]>) -> Result<MeanFieldMatch> {
    let est = problem.layout.weight_cpd.mean_at(&problem.store, grid)?;
    let est: Vec<f64> = est.column(0).to_vec();
    let truth = brain.cpd.mean.evaluate(grid);
    let k = identifiability_scale(&est, &truth, mask)?;
    let keep = |i: usize| mask.is_none_or(|m| m[i]);
    let a: Vec<f64> = (0..est.len()).filter(|&i| keep(i)).map(|i| k * est[i]).collect();
    let b: Vec<f64> = (0..est.len()).filter(|&i| keep(i)).map(|i| truth[i]).collect();
    let rmse = (a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64).sqrt();
    Ok(MeanFieldMatch {
        k,
        pearson: pearson_slice(&a, &b),
        rmse,
    })
}

/// Grid points where `inst`'s neurons were active.
pub fn active_mask(inst: &SimInstance, grid: &Array2<f64>) -> Vec<bool> {
    let silent_dir = match inst.index % 4 {
        0 => [-1.0, 0.0],
        1 => [0.0, 1.0],
        2 => [1.0, 0.0],
        _ => [0.0, -1.0],
    };
    grid.rows()
        .into_iter()
        .map(|m| (m[0] - 0.5) * silent_dir[0] + (m[1] - 0.5) * silent_dir[1] <= 0.0)
        .collect()
}

/// Synthesized and isolated fits of one simulated ecosystem, scored side by side.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimBrainComparison {
    /// Test and OOD rows of the synthesis.
    pub synthesized: Vec<InstanceMetrics>,
    /// Test and OOD rows of one isolated fit per instance.
    pub isolated: Vec<InstanceMetrics>,
    /// Learned CPD mean against the ground truth on a 50×50 grid.
    pub mean_field: MeanFieldMatch,
}

fn r2_of<'a>(rows: &'a [InstanceMetrics], split: &'a str) -> impl Iterator<Item = f64> + 'a {
    rows.iter().filter(move |r| r.split == split).filter_map(|r| r.r2)
}

impl SimBrainComparison {
    pub fn positive_ood_fraction(rows: &[InstanceMetrics]) -> f64 {
        let r2: Vec<f64> = r2_of(rows, "ood").collect();
        r2.iter().filter(|&&v| v > 0.0).count() as f64 / r2.len().max(1) as f64
    }

    pub fn mean_test_r2(rows: &[InstanceMetrics]) -> f64 {
        let r2: Vec<f64> = r2_of(rows, "test").collect();
        r2.iter().sum::<f64>() / r2.len().max(1) as f64
    }
}

pub fn compare(brain: &SimBrain, cfg: &SimBrainFit, seed: u64) -> Result<SimBrainComparison> {
    let all: Vec<usize> = (0..brain.instances.len()).collect();
    let mut problem = build_problem(brain, &all, cfg, seed)?;
    fit_problem(&mut problem, brain, cfg, seed, None)?;
    let synthesized = report(&problem, brain, &["test", "ood"], None, seed)?;
    let mean_field = learned_mean_match(&problem, brain, &property_grid(50), None)?;
    let mut isolated = Vec::new();
    for p in fit_all_isolated(brain, cfg, seed)? {
        isolated.extend(report(&p, brain, &["test", "ood"], None, seed)?);
    }
    Ok(SimBrainComparison {
        synthesized,
        isolated,
        mean_field,
    })
}
