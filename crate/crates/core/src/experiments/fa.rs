use ndarray::{concatenate, Array2, Axis};
use serde::{Deserialize, Serialize};

use super::seeded;
use crate::diffmath::AdamState;
use crate::engine::rng::{derive_seed, stream, Purpose};
use crate::engine::{
    constrained_posterior_init, eval_test_elbo, fit, EarlyStop, FaInit, FaSetup, FitOutcome, InstanceData, InstanceTest,
    LrSchedule, RefitOptions, SynthesisProblem, TrainConfig,
};
use crate::error::{DpmsError, Result};
use crate::eval::{fa_em, loading_alignment, orthonormalize_fa, InstanceMetrics};
use crate::shbf::GridLayout;
use crate::synthgen::{FaInstance, FaScenario, RegimeData};

/// Which regime each instance trains on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Assignment {
    /// Instance `i` trains on regime `i mod R`.
    DifferentBehavior,
    /// Every instance trains on the target's regime.
    SameBehavior,
}

impl Assignment {
    pub fn regime(&self, instance: usize, target: usize, regimes: usize) -> usize {
        match self {
            Assignment::DifferentBehavior => instance % regimes,
            Assignment::SameBehavior => target % regimes,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FaFit {
    pub tiles: Vec<usize>,
    pub overlap: f64,
    pub init: FaInit,
    pub pin: TrainConfig,
    pub train: TrainConfig,
    pub refit: RefitOptions,
    /// Posterior draws for held-out ELBOs.
    pub eval_samples: usize,
    /// EM iterations for the independently fit baseline.
    pub em_iterations: usize,
    /// Property bins per dimension when comparing loadings across instances.
    pub alignment_bins: usize,
}

impl Default for FaFit {
    fn default() -> Self {
        let mut train = TrainConfig::new(1500, LrSchedule(vec![(0, 0.01), (500, 0.001)]), 0);
        train.early_stop = EarlyStop::Elbo;
        Self {
            tiles: vec![8, 8, 8],
            overlap: 0.5,
            init: FaInit::default(),
            pin: TrainConfig::new(500, LrSchedule::constant(0.01), 0),
            train,
            refit: RefitOptions::default(),
            eval_samples: 10,
            em_iterations: 200,
            alignment_bins: 4,
        }
    }
}

impl FaFit {
    pub fn layout(&self) -> Result<GridLayout> {
        let d = self.tiles.len();
        GridLayout::uniform(&vec![0.0; d], &vec![1.0; d], &self.tiles, self.overlap)
    }
}

fn stack(parts: Vec<&Array2<f64>>) -> Result<Array2<f64>> {
    let views: Vec<_> = parts.iter().map(|a| a.view()).collect();
    concatenate(Axis(0), &views).map_err(|e| DpmsError::Invalid(e.to_string()))
}

/// Held-out data of `inst` from every regime except `regime`.
pub fn off_regime_test(inst: &FaInstance, regime: usize) -> Result<Array2<f64>> {
    stack(inst.regimes.iter().enumerate().filter(|(r, _)| *r != regime).map(|(_, d)| &d.test).collect())
}

/// Problem over the chosen instances, each on its assigned regime.
pub fn build_problem(scenario: &FaScenario, indices: &[usize], assignment: Assignment, target: usize, cfg: &FaFit) -> Result<SynthesisProblem> {
    let regimes = scenario.laws.len();
    let data = indices
        .iter()
        .map(|&i| (i, &scenario.instances[i]))
        .map(|(i, inst)| InstanceData {
            name: inst.name.clone(),
            x: inst.regimes[assignment.regime(i, target, regimes)].train.clone(),
            y: None,
            props: inst.props.clone(),
        })
        .collect();
    let setup = FaSetup {
        layout: cfg.layout()?,
        latent_dim: scenario.spec.latent_dim,
        init: cfg.init.clone(),
    };
    SynthesisProblem::factor_analysis(data, &setup)
}

fn position(scenario: &FaScenario, name: &str) -> Result<usize> {
    scenario
        .instances
        .iter()
        .position(|i| i.name == name)
        .ok_or_else(|| DpmsError::Invalid(format!("no generated instance {name}")))
}

/// Validation data of each problem instance's assigned regime.
pub fn validation_tests(problem: &SynthesisProblem, scenario: &FaScenario, assignment: Assignment, target: usize) -> Result<Vec<InstanceTest>> {
    split_tests(problem, scenario, assignment, target, |d| &d.validation)
}

/// Test data of each problem instance's assigned regime.
pub fn own_regime_tests(problem: &SynthesisProblem, scenario: &FaScenario, assignment: Assignment, target: usize) -> Result<Vec<InstanceTest>> {
    split_tests(problem, scenario, assignment, target, |d| &d.test)
}

/// Held-out data of each problem instance from the regimes it did not train on.
pub fn off_regime_tests(problem: &SynthesisProblem, scenario: &FaScenario, assignment: Assignment, target: usize) -> Result<Vec<InstanceTest>> {
    let regimes = scenario.laws.len();
    problem
        .data
        .iter()
        .map(|d| {
            let i = position(scenario, &d.name)?;
            Ok(InstanceTest {
                x: off_regime_test(&scenario.instances[i], assignment.regime(i, target, regimes))?,
                y: None,
            })
        })
        .collect()
}

fn split_tests(
    problem: &SynthesisProblem,
    scenario: &FaScenario,
    assignment: Assignment,
    target: usize,
    pick: impl Fn(&RegimeData) -> &Array2<f64>,
) -> Result<Vec<InstanceTest>> {
    let regimes = scenario.laws.len();
    problem
        .data
        .iter()
        .map(|d| {
            let i = position(scenario, &d.name)?;
            Ok(InstanceTest {
                x: pick(&scenario.instances[i].regimes[assignment.regime(i, target, regimes)]).clone(),
                y: None,
            })
        })
        .collect()
}

/// Validation score used for early stopping: mean per-sample held-out ELBO.
pub fn elbo_metric(tests: Vec<InstanceTest>, refit: RefitOptions, seed: u64) -> impl Fn(&SynthesisProblem) -> Result<f64> + Sync {
    move |p: &SynthesisProblem| {
        let e = eval_test_elbo(p, &tests, Some(&refit), 1, seed)?;
        Ok(e.iter().map(|t| t.normalized).sum::<f64>() / e.len() as f64)
    }
}

/// Constrained initialization, then synthesis with early stopping on the
/// mean validation ELBO of each instance's training regime.
pub fn fit_problem(
    problem: &mut SynthesisProblem,
    scenario: &FaScenario,
    assignment: Assignment,
    target: usize,
    cfg: &FaFit,
    seed: u64,
) -> Result<(FitOutcome, FitOutcome)> {
    let validation = validation_tests(problem, scenario, assignment, target)?;
    let pin = constrained_posterior_init(problem, &seeded(&cfg.pin, derive_seed(seed, &[1])))?;
    let train = seeded(&cfg.train, derive_seed(seed, &[2]));
    let metric = elbo_metric(validation, cfg.refit, derive_seed(seed, &[3]));
    let mut adam = AdamState::new(&problem.store);
    let use_metric = train.early_stop != EarlyStop::None;
    let outcome = fit(problem, &mut adam, &train, 0, use_metric.then_some(&metric as _))?;
    Ok((pin, outcome))
}

/// Held-out ELBO of `target` on data from the regimes it did not train on.
pub fn off_regime_elbo(
    problem: &SynthesisProblem,
    scenario: &FaScenario,
    assignment: Assignment,
    target: usize,
    cfg: &FaFit,
    seed: u64,
) -> Result<InstanceMetrics> {
    let regimes = scenario.laws.len();
    let inst = &scenario.instances[target];
    let s = problem
        .index_of(&inst.name)
        .ok_or_else(|| DpmsError::Invalid(format!("{} is not in the problem", inst.name)))?;
    let own = assignment.regime(target, target, regimes);
    let x = off_regime_test(inst, own)?;
    let single = problem.clone().restrict_to(s)?;
    let e = eval_test_elbo(&single, &[InstanceTest { x, y: None }], Some(&cfg.refit), cfg.eval_samples, derive_seed(seed, &[4]))?;
    Ok(InstanceMetrics {
        instance: inst.name.clone(),
        split: format!("{}-off-regime", assignment_label(assignment)),
        elbo: Some(e[0].elbo),
        normalized_elbo: Some(e[0].normalized),
        r2: None,
        corr: None,
    })
}

pub fn assignment_label(a: Assignment) -> &'static str {
    match a {
        Assignment::DifferentBehavior => "db",
        Assignment::SameBehavior => "sb",
    }
}

/// Rows of `loadings` averaged within cubic property bins; `None` for empty bins.
pub fn binned_loadings(loadings: &Array2<f64>, props: &Array2<f64>, bins: usize) -> Vec<Option<Vec<f64>>> {
    let dims = props.ncols();
    let total = bins.pow(dims as u32);
    let dz = loadings.ncols();
    let mut sums = vec![vec![0.0; dz]; total];
    let mut counts = vec![0usize; total];
    for (row, m) in loadings.rows().into_iter().zip(props.rows()) {
        let mut flat = 0;
        for &v in m.iter() {
            let b = ((v * bins as f64).floor() as isize).clamp(0, bins as isize - 1) as usize;
            flat = flat * bins + b;
        }
        counts[flat] += 1;
        for (acc, &v) in sums[flat].iter_mut().zip(row.iter()) {
            *acc += v;
        }
    }
    sums.into_iter()
        .zip(counts)
        .map(|(s, c)| (c > 0).then(|| s.iter().map(|v| v / c as f64).collect()))
        .collect()
}

/// Mean principal-angle cosine between two instances' loadings after
/// orthonormalization, compared on property bins occupied by both.
pub fn pairwise_alignment(a: (&Array2<f64>, &Array2<f64>), b: (&Array2<f64>, &Array2<f64>), bins: usize) -> Result<f64> {
    let ba = binned_loadings(&orthonormalize_fa(a.0).loadings, a.1, bins);
    let bb = binned_loadings(&orthonormalize_fa(b.0).loadings, b.1, bins);
    let shared: Vec<usize> = (0..ba.len()).filter(|&k| ba[k].is_some() && bb[k].is_some()).collect();
    let dz = a.0.ncols();
    if shared.len() < dz {
        return Err(DpmsError::Invalid(format!("only {} shared property bins for {dz} latent dimensions", shared.len())));
    }
    let pick = |bl: &Vec<Option<Vec<f64>>>| Array2::from_shape_fn((shared.len(), dz), |(r, j)| bl[shared[r]].as_ref().expect("shared bin")[j]);
    Ok(loading_alignment(&pick(&ba), &pick(&bb))?.mean_cosine)
}

/// Mean alignment over all instance pairs.
pub fn mean_pairwise_alignment(loadings: &[Array2<f64>], props: &[&Array2<f64>], bins: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut pairs = 0;
    for i in 0..loadings.len() {
        for j in i + 1..loadings.len() {
            total += pairwise_alignment((&loadings[i], props[i]), (&loadings[j], props[j]), bins)?;
            pairs += 1;
        }
    }
    if pairs == 0 {
        return Err(DpmsError::Invalid("alignment needs at least two instances".into()));
    }
    Ok(total / pairs as f64)
}

/// Posterior-mean loadings of every instance in `problem`.
pub fn posterior_loadings(problem: &SynthesisProblem) -> Vec<Array2<f64>> {
    (0..problem.len()).map(|s| problem.instance(s).weights.means(&problem.store)).collect()
}

/// Maximum-likelihood loadings fit to each instance's assigned regime alone.
pub fn independent_loadings(scenario: &FaScenario, assignment: Assignment, target: usize, cfg: &FaFit, seed: u64) -> Result<Vec<Array2<f64>>> {
    let regimes = scenario.laws.len();
    scenario
        .instances
        .iter()
        .enumerate()
        .map(|(i, inst)| {
            let mut rng = stream(seed, i as u64, 0, 0, Purpose::Init);
            let x = &inst.regimes[assignment.regime(i, target, regimes)].train;
            Ok(fa_em(x, scenario.spec.latent_dim, cfg.em_iterations, &mut rng)?.loadings)
        })
        .collect()
}

/// Off-regime ELBOs of one target under both assignments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetComparison {
    pub target: String,
    pub db: InstanceMetrics,
    pub sb: InstanceMetrics,
}

impl TargetComparison {
    pub fn db_wins(&self) -> bool {
        self.db.normalized_elbo > self.sb.normalized_elbo
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaComparison {
    pub targets: Vec<TargetComparison>,
    /// Mean pairwise alignment of the db synthesis' posterior loadings.
    pub synthesized_alignment: f64,
    /// The same for per-instance EM fits on the db data.
    pub independent_alignment: f64,
}

/// Fits the db synthesis once (its data do not depend on the target) and
/// one sb synthesis per target, then scores every target on the regimes it
/// did not train on.
pub fn compare(scenario: &FaScenario, cfg: &FaFit, seed: u64) -> Result<FaComparison> {
    let all: Vec<usize> = (0..scenario.instances.len()).collect();
    let db = Assignment::DifferentBehavior;
    let mut db_problem = build_problem(scenario, &all, db, 0, cfg)?;
    fit_problem(&mut db_problem, scenario, db, 0, cfg, seed)?;
    let mut targets = Vec::with_capacity(all.len());
    for &t in &all {
        let sb = Assignment::SameBehavior;
        let mut sb_problem = build_problem(scenario, &all, sb, t, cfg)?;
        fit_problem(&mut sb_problem, scenario, sb, t, cfg, seed)?;
        targets.push(TargetComparison {
            target: scenario.instances[t].name.clone(),
            db: off_regime_elbo(&db_problem, scenario, db, t, cfg, seed)?,
            sb: off_regime_elbo(&sb_problem, scenario, sb, t, cfg, seed)?,
        });
        log::info!("{}: db {:?} sb {:?}", targets[t].target, targets[t].db.normalized_elbo, targets[t].sb.normalized_elbo);
    }
    let props: Vec<&Array2<f64>> = scenario.instances.iter().map(|i| &i.props).collect();
    Ok(FaComparison {
        targets,
        synthesized_alignment: mean_pairwise_alignment(&posterior_loadings(&db_problem), &props, cfg.alignment_bins)?,
        independent_alignment: mean_pairwise_alignment(&independent_loadings(scenario, db, 0, cfg, seed)?, &props, cfg.alignment_bins)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn bins_average_rows() {
        let l = array![[1.0, 0.0], [3.0, 2.0], [5.0, 5.0]];
        let m = array![[0.1, 0.1, 0.1], [0.2, 0.2, 0.2], [0.9, 0.9, 0.9]];
        let b = binned_loadings(&l, &m, 2);
        assert_eq!(b.len(), 8);
        assert_eq!(b[0], Some(vec![2.0, 1.0]));
        assert_eq!(b[7], Some(vec![5.0, 5.0]));
        assert!(b[1..7].iter().all(Option::is_none));
    }

    #[test]
    fn assignments() {
        assert_eq!(Assignment::DifferentBehavior.regime(2, 0, 3), 2);
        assert_eq!(Assignment::SameBehavior.regime(2, 0, 3), 0);
    }
}
