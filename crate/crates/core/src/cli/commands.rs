use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use super::config::{Experiment, RunConfig};
use crate::diffmath::AdamState;
use crate::engine::rng::derive_seed;
use crate::engine::{
    constrained_posterior_init, eval_test_elbo, fit_continuing, mean_r2, restore_problem, save_checkpoint, CheckpointInfo, EarlyStop,
    FitOutcome, InstanceData, InstanceTest, MetricRecord, SynthesisProblem, TrainConfig, VERSION,
};
use crate::error::{DpmsError, Result};
use crate::eval::{InstanceMetrics, MetricReport};
use crate::experiments::{fa, linear, sim_brain};
use crate::synthgen::{gen_fa_multibehavior, gen_linear_one_sample, gen_sim_brain, Dataset, FaScenario, LinearOneSample, SimBrain};
use crate::tensor_io::{create_dir, read_json, write_json};

pub const RUN_CONFIG_FILE: &str = "run_config.json";
pub const RUN_FILE: &str = "run.json";
const CHECKPOINTS: &str = "checkpoints";
const FINAL: &str = "final";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode", content = "instance")]
pub enum FitMode {
    Synthesize,
    /// Only the instance at this dataset position.
    Isolated(usize),
}

/// Provenance written by `fit` and read back by `eval`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRecord {
    pub version: String,
    pub config: RunConfig,
    pub fit_mode: FitMode,
    pub outcome: FitOutcome,
}

/// Fills in the effective seed so the written config reproduces the run.
fn resolved(cfg: &RunConfig, seed: Option<u64>) -> RunConfig {
    let mut c = cfg.clone();
    c.seed = Some(cfg.seed.or(seed).unwrap_or(0));
    c
}

pub fn cmd_generate(cfg: &RunConfig, seed: Option<u64>, out: &Path) -> Result<Dataset> {
    let cfg = resolved(cfg, seed);
    cfg.validate()?;
    let seed = cfg.seed();
    let scale = cfg.scale();
    let ds = match cfg.experiment {
        Experiment::SimBrain => gen_sim_brain(&cfg.sim_brain, &scale, seed)?.to_dataset()?,
        Experiment::LinearOneSample => gen_linear_one_sample(cfg.linear.instances, seed).to_dataset(),
        Experiment::FaDbSb => gen_fa_multibehavior(&cfg.fa, seed, &scale)?.to_dataset(),
    };
    ds.save(out)?;
    write_json(&out.join(RUN_CONFIG_FILE), &cfg)?;
    info!("wrote {} instances to {}", ds.instances.len(), out.display());
    Ok(ds)
}

/// Generated data of any experiment.
enum Loaded {
    Brain(SimBrain),
    Linear(LinearOneSample),
    Fa(FaScenario),
}

fn load_data(cfg: &RunConfig, dir: &Path) -> Result<Loaded> {
    let ds = Dataset::load(dir)?;
    ds.expect_experiment(cfg.experiment.name())?;
    Ok(match cfg.experiment {
        Experiment::SimBrain => Loaded::Brain(SimBrain::from_dataset(&ds)?),
        Experiment::LinearOneSample => Loaded::Linear(LinearOneSample::from_dataset(&ds)?),
        Experiment::FaDbSb => Loaded::Fa(FaScenario::from_dataset(&ds)?),
    })
}

fn count(data: &Loaded) -> usize {
    match data {
        Loaded::Brain(b) => b.instances.len(),
        Loaded::Linear(l) => l.instances.len(),
        Loaded::Fa(f) => f.instances.len(),
    }
}

fn indices(data: &Loaded, mode: FitMode) -> Result<Vec<usize>> {
    let n = count(data);
    match mode {
        FitMode::Synthesize => Ok((0..n).collect()),
        FitMode::Isolated(i) if i < n => Ok(vec![i]),
        FitMode::Isolated(i) => Err(DpmsError::Invalid(format!("instance {i} out of range (dataset has {n})"))),
    }
}

/// Phases and validation metric of one experiment's fit.
struct Plan {
    problem: SynthesisProblem,
    pin: Option<TrainConfig>,
    train: TrainConfig,
    metric: Option<Box<dyn Fn(&SynthesisProblem) -> Result<f64> + Sync>>,
}

fn plan(cfg: &RunConfig, data: &Loaded, idx: &[usize]) -> Result<Plan> {
    let seed = cfg.seed();
    let with_seed = |c: &TrainConfig, k: u64| TrainConfig {
        seed: derive_seed(seed, &[k]),
        ..c.clone()
    };
    Ok(match data {
        Loaded::Brain(brain) => {
            let f = &cfg.sim_brain_fit;
            let problem = sim_brain::build_problem(brain, idx, f, seed)?;
            let tests = sim_brain::validation_tests(&problem, brain)?;
            let metric = (f.train.early_stop != EarlyStop::None).then(|| {
                Box::new(move |p: &SynthesisProblem| mean_r2(p, &tests)) as Box<dyn Fn(&SynthesisProblem) -> Result<f64> + Sync>
            });
            Plan {
                problem,
                pin: Some(with_seed(&f.pin, 1)),
                train: with_seed(&f.train, 2),
                metric,
            }
        }
        Loaded::Linear(lin) => {
            let subset = LinearOneSample {
                seed: lin.seed,
                instances: idx.iter().map(|&i| lin.instances[i].clone()).collect(),
            };
            Plan {
                problem: linear::build_problem(&subset, &cfg.linear.fit)?,
                pin: None,
                train: TrainConfig {
                    early_stop: EarlyStop::None,
                    ..with_seed(&cfg.linear.fit.train, 2)
                },
                metric: None,
            }
        }
        Loaded::Fa(sc) => {
            let run = &cfg.fa_run;
            let problem = fa::build_problem(sc, idx, run.assignment, run.target, &run.fit)?;
            let tests = fa::validation_tests(&problem, sc, run.assignment, run.target)?;
            let metric = (run.fit.train.early_stop != EarlyStop::None).then(|| {
                Box::new(fa::elbo_metric(tests, run.fit.refit, derive_seed(seed, &[3])))
                    as Box<dyn Fn(&SynthesisProblem) -> Result<f64> + Sync>
            });
            Plan {
                problem,
                pin: Some(with_seed(&run.fit.pin, 1)),
                train: with_seed(&run.fit.train, 2),
                metric,
            }
        }
    })
}

fn training_data(problem: &SynthesisProblem) -> Vec<InstanceData> {
    problem.data.clone()
}

/// Most recent scheduled checkpoint under `dir`.
fn latest_checkpoint(dir: &Path) -> Result<Option<PathBuf>> {
    if !dir.exists() {
        return Ok(None);
    }
    let mut names: Vec<String> = fs::read_dir(dir)
        .map_err(|e| DpmsError::io(dir, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter(|n| n.starts_with("epoch-") && dir.join(n).join("manifest.json").exists())
        .collect();
    names.sort();
    Ok(names.pop().map(|n| dir.join(n)))
}

/// Fits and writes `out/{run.json, run_config.json, checkpoints/, final/}`.
/// With `resume`, continues from the newest checkpoint in `out`.
pub fn cmd_fit(cfg: &RunConfig, seed: Option<u64>, data_dir: &Path, mode: FitMode, out: &Path, resume: bool) -> Result<RunRecord> {
    let cfg = resolved(cfg, seed);
    cfg.validate()?;
    let data = load_data(&cfg, data_dir)?;
    let idx = indices(&data, mode)?;
    let Plan {
        mut problem,
        pin,
        mut train,
        metric,
    } = plan(&cfg, &data, &idx)?;
    create_dir(out)?;
    write_json(&out.join(RUN_CONFIG_FILE), &cfg)?;
    let ckpt_dir = out.join(CHECKPOINTS);
    train.checkpoint_dir = Some(ckpt_dir.clone());

    let resume_from = if resume { latest_checkpoint(&ckpt_dir)? } else { None };
    let (mut adam, prior) = match &resume_from {
        Some(dir) => {
            let (p, adam, manifest) = restore_problem(dir, training_data(&problem))?;
            problem = p;
            info!("resuming from {} (epoch {})", dir.display(), manifest.epoch);
            let prior = FitOutcome {
                history: manifest.history,
                trace: manifest.trace,
                epochs_run: manifest.epoch,
                ..FitOutcome::default()
            };
            (adam, prior)
        }
        None => {
            if let Some(pin) = &pin {
                constrained_posterior_init(&mut problem, pin)?;
            }
            (AdamState::new(&problem.store), FitOutcome::default())
        }
    };
    let start = prior.epochs_run;
    let mut outcome = fit_continuing(&mut problem, &mut adam, &train, prior, metric.as_deref())?;

    if metric.is_some() {
        if let Some(best) = best_record(&outcome.history) {
            if best.epoch <= start {
                let dir = ckpt_dir.join(format!("epoch-{:06}", best.epoch));
                let (p, _, _) = restore_problem(&dir, training_data(&problem))?;
                problem.store = p.store;
            }
            outcome.best_epoch = best.epoch;
            outcome.best_metric = best.metric;
        }
    }
    let info = CheckpointInfo {
        epoch: outcome.best_epoch,
        phase: "final".into(),
        history: outcome.history.clone(),
        trace: outcome.trace.clone(),
        config: serde_json::to_value(&cfg)?,
    };
    save_checkpoint(&problem, &adam, &info, &out.join(FINAL))?;
    let record = RunRecord {
        version: VERSION.to_string(),
        config: cfg,
        fit_mode: mode,
        outcome,
    };
    write_json(&out.join(RUN_FILE), &record)?;
    Ok(record)
}

/// First record with the largest finite metric.
fn best_record(history: &[MetricRecord]) -> Option<&MetricRecord> {
    history
        .iter()
        .filter(|r| r.metric.is_some_and(f64::is_finite))
        .fold(None, |best: Option<&MetricRecord>, r| match best {
            Some(b) if b.metric >= r.metric => Some(b),
            _ => Some(r),
        })
}

pub const SIM_BRAIN_SPLITS: [&str; 4] = ["train", "validation", "test", "ood"];
pub const FA_SPLITS: [&str; 3] = ["validation", "test", "off-regime"];
pub const LINEAR_SPLITS: [&str; 1] = ["train"];

fn check_splits(splits: &[String], allowed: &[&str]) -> Result<()> {
    for s in splits {
        if !allowed.contains(&s.as_str()) {
            return Err(DpmsError::Invalid(format!("unknown split {s:?}; expected one of {allowed:?}")));
        }
    }
    Ok(())
}

fn elbo_rows(problem: &SynthesisProblem, tests: &[InstanceTest], split: &str, refit: Option<&crate::engine::RefitOptions>, samples: usize, seed: u64) -> Result<Vec<InstanceMetrics>> {
    let e = eval_test_elbo(problem, tests, refit, samples, seed)?;
    Ok(e.iter()
        .zip(&problem.data)
        .map(|(t, d)| InstanceMetrics {
            instance: d.name.clone(),
            split: split.to_string(),
            elbo: Some(t.elbo),
            normalized_elbo: Some(t.normalized),
            r2: None,
            corr: None,
        })
        .collect())
}

/// Evaluates the selected parameters of a fit on the requested splits and
/// writes `metrics.json`, `metrics.csv` and the run config into `out`.
pub fn cmd_eval(fit_dir: &Path, data_dir: &Path, splits: &[String], out: &Path) -> Result<MetricReport> {
    let record: RunRecord = read_json(&fit_dir.join(RUN_FILE))?;
    let cfg = record.config;
    let seed = derive_seed(cfg.seed(), &[4]);
    let data = load_data(&cfg, data_dir)?;
    let idx = indices(&data, record.fit_mode)?;
    let built = plan(&cfg, &data, &idx)?;
    let (problem, _, _) = restore_problem(&fit_dir.join(FINAL), training_data(&built.problem))?;
    let rows = match &data {
        Loaded::Brain(brain) => {
            check_splits(splits, &SIM_BRAIN_SPLITS)?;
            let names: Vec<&str> = splits.iter().map(String::as_str).collect();
            sim_brain::report(&problem, brain, &names, Some(cfg.sim_brain_fit.eval_samples), seed)?
        }
        Loaded::Linear(_) => {
            check_splits(splits, &LINEAR_SPLITS)?;
            let tests: Vec<InstanceTest> = problem
                .data
                .iter()
                .map(|d| InstanceTest {
                    x: d.x.clone(),
                    y: d.y.clone(),
                })
                .collect();
            write_json(&out_dir(out)?.join("cpd.json"), &linear::summarize(&problem)?)?;
            if splits.is_empty() {
                Vec::new()
            } else {
                elbo_rows(&problem, &tests, "train", None, 1000, seed)?
            }
        }
        Loaded::Fa(sc) => {
            check_splits(splits, &FA_SPLITS)?;
            let run = &cfg.fa_run;
            let mut rows = Vec::new();
            for split in splits {
                let tests = match split.as_str() {
                    "validation" => fa::validation_tests(&problem, sc, run.assignment, run.target)?,
                    "test" => fa::own_regime_tests(&problem, sc, run.assignment, run.target)?,
                    _ => fa::off_regime_tests(&problem, sc, run.assignment, run.target)?,
                };
                rows.extend(elbo_rows(&problem, &tests, split, Some(&run.fit.refit), run.fit.eval_samples, seed)?);
            }
            rows
        }
    };
    let report = MetricReport::new(cfg.experiment.name(), rows);
    if !report.is_finite() {
        return Err(DpmsError::NonFinite(format!("metric report for {}", fit_dir.display())));
    }
    let dir = out_dir(out)?;
    fs::write(dir.join("metrics.json"), report.to_json()?).map_err(|e| DpmsError::io(dir.join("metrics.json"), e))?;
    fs::write(dir.join("metrics.csv"), report.to_csv()).map_err(|e| DpmsError::io(dir.join("metrics.csv"), e))?;
    write_json(&dir.join(RUN_CONFIG_FILE), &cfg)?;
    Ok(report)
}

fn out_dir(out: &Path) -> Result<&Path> {
    create_dir(out)?;
    Ok(out)
}
