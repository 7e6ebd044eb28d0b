//! Minibatch Adam training with periodic checkpoints and retrospective
//! selection of the best checkpoint.

use std::path::PathBuf;
use std::sync::Arc;

use log::{debug, info};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::checkpoint::{save_checkpoint, CheckpointInfo};
use super::elbo::{elbo_step, ElboOptions};
use super::problem::SynthesisProblem;
use super::rng::{batch_count, epoch_batches, stream, Purpose};
use crate::diffmath::AdamState;
use crate::error::{DpmsError, Result};

/// Piecewise-constant learning rate: entry `(e, lr)` applies from epoch `e`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule(pub Vec<(usize, f64)>);

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        Self(vec![(0, lr)])
    }

    /// `lr` divided by `factor` every `every` epochs.
    pub fn step_decay(lr: f64, factor: f64, every: usize, epochs: usize) -> Self {
        let mut out = Vec::new();
        let mut e = 0;
        let mut cur = lr;
        while e < epochs.max(1) {
            out.push((e, cur));
            e += every.max(1);
            cur /= factor;
        }
        Self(out)
    }

    pub fn at(&self, epoch: usize) -> f64 {
        self.0
            .iter()
            .take_while(|(e, _)| *e <= epoch)
            .last()
            .or(self.0.first())
            .map(|&(_, lr)| lr)
            .unwrap_or(0.0)
    }

    fn validate(&self) -> Result<()> {
        if self.0.is_empty() || self.0.iter().any(|&(_, lr)| !(lr > 0.0 && lr.is_finite())) {
            return Err(DpmsError::Config("learning rates must be positive and finite".into()));
        }
        if self.0.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(DpmsError::Config("learning-rate schedule epochs must increase".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EarlyStop {
    None,
    R2,
    Elbo,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub schedule: LrSchedule,
    /// Fraction of an instance's samples per batch.
    pub batch_fraction: f64,
    pub checkpoint_every: usize,
    pub early_stop: EarlyStop,
    pub seed: u64,
    pub elbo: ElboOptions,
    /// Writes every scheduled checkpoint under this directory when set.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::new(1000, LrSchedule::constant(0.01), 0)
    }
}

impl TrainConfig {
    pub fn new(epochs: usize, schedule: LrSchedule, seed: u64) -> Self {
        Self {
            epochs,
            schedule,
            batch_fraction: 0.5,
            checkpoint_every: 100,
            early_stop: EarlyStop::None,
            seed,
            elbo: ElboOptions::default(),
            checkpoint_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if !(self.batch_fraction > 0.0 && self.batch_fraction <= 1.0) {
            return Err(DpmsError::Config(format!("batch fraction {} not in (0, 1]", self.batch_fraction)));
        }
        if self.checkpoint_every == 0 {
            return Err(DpmsError::Config("checkpoint interval must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub epoch: usize,
    /// Mean training ELBO over the epoch's iterations.
    pub train_elbo: f64,
    pub metric: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FitOutcome {
    pub history: Vec<MetricRecord>,
    /// Training ELBO of every iteration.
    pub trace: Vec<f64>,
    /// Epoch count at the restored checkpoint (the last epoch without a metric).
    pub best_epoch: usize,
    pub best_metric: Option<f64>,
    /// Epochs completed, including any before a resume.
    pub epochs_run: usize,
}

/// Validation score; larger is better.
pub type Metric<'a> = dyn Fn(&SynthesisProblem) -> Result<f64> + Sync + 'a;

/// Runs epochs `start_epoch..config.epochs`. With a metric, the parameters
/// of the best scheduled checkpoint are restored at the end.
pub fn fit(
    problem: &mut SynthesisProblem,
    adam: &mut AdamState,
    config: &TrainConfig,
    start_epoch: usize,
    metric: Option<&Metric<'_>>,
) -> Result<FitOutcome> {
    let prior = FitOutcome {
        epochs_run: start_epoch,
        ..FitOutcome::default()
    };
    fit_continuing(problem, adam, config, prior, metric)
}

/// Like [`fit`], continuing after `prior.epochs_run` epochs whose history and
/// trace are carried into the outcome and later checkpoints. Only epochs run
/// here compete for the best checkpoint.
pub fn fit_continuing(
    problem: &mut SynthesisProblem,
    adam: &mut AdamState,
    config: &TrainConfig,
    prior: FitOutcome,
    metric: Option<&Metric<'_>>,
) -> Result<FitOutcome> {
    config.validate()?;
    let iters = if config.batch_fraction >= 1.0 { 1 } else { batch_count(config.batch_fraction) };
    let start_epoch = prior.epochs_run;
    let mut outcome = FitOutcome {
        best_epoch: start_epoch,
        best_metric: None,
        ..prior
    };
    let mut last_good = (problem.store.snapshot(), adam.clone());
    let mut best: Option<(f64, Vec<Array2<f64>>)> = None;
    for epoch in start_epoch..config.epochs {
        let lr = config.schedule.at(epoch);
        let batches: Vec<Vec<Arc<[usize]>>> = problem
            .streams
            .iter()
            .zip(&problem.data)
            .map(|(&id, d)| {
                let mut rng = stream(config.seed, id, epoch as u64, 0, Purpose::Batches);
                epoch_batches(d.samples(), config.batch_fraction, &mut rng)
            })
            .collect();
        let mut epoch_total = 0.0;
        for it in 0..iters {
            let sel: Vec<Option<Arc<[usize]>>> = batches
                .iter()
                .map(|b| if iters == 1 { None } else { Some(b[it % b.len()].clone()) })
                .collect();
            let rngs = problem
                .streams
                .iter()
                .map(|&id| stream(config.seed, id, epoch as u64, it as u64, Purpose::Noise))
                .collect();
            let step = match elbo_step(problem, &sel, rngs, &config.elbo, true) {
                Ok(s) => s,
                Err(e) => {
                    problem.store.restore(&last_good.0)?;
                    *adam = last_good.1;
                    return Err(DpmsError::Diverged {
                        epoch,
                        detail: e.to_string(),
                    });
                }
            };
            problem.store.zero_grads();
            problem.store.accumulate(&step.grads)?;
            adam.step(&mut problem.store, lr)?;
            epoch_total += step.total;
            outcome.trace.push(step.total);
        }
        let done = epoch + 1;
        outcome.epochs_run = done;
        if done % config.checkpoint_every == 0 || done == config.epochs {
            let score = metric.map(|m| m(problem)).transpose()?;
            if let Some(v) = score {
                if !v.is_finite() {
                    debug!("epoch {done}: non-finite validation metric {v}");
                }
            }
            let record = MetricRecord {
                epoch: done,
                train_elbo: epoch_total / iters as f64,
                metric: score,
            };
            info!("epoch {done}: train ELBO {:.4} metric {:?}", record.train_elbo, score);
            outcome.history.push(record);
            if let Some(v) = score.filter(|v| v.is_finite()) {
                if best.as_ref().is_none_or(|(b, _)| v > *b) {
                    best = Some((v, problem.store.snapshot()));
                    outcome.best_epoch = done;
                    outcome.best_metric = Some(v);
                }
            } else if metric.is_none() {
                outcome.best_epoch = done;
            }
            last_good = (problem.store.snapshot(), adam.clone());
            if let Some(dir) = &config.checkpoint_dir {
                let info = CheckpointInfo {
                    epoch: done,
                    phase: "fit".into(),
                    history: outcome.history.clone(),
                    trace: outcome.trace.clone(),
                    config: serde_json::to_value(config)?,
                };
                save_checkpoint(problem, adam, &info, &dir.join(format!("epoch-{done:06}")))?;
            }
        }
    }
    if let Some((_, snap)) = best {
        problem.store.restore(&snap)?;
    }
    Ok(outcome)
}
