//! Held-out evaluation: posterior-mean predictions and test-set ELBOs.

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::elbo::{elbo_step, ElboOptions, StepResult};
use super::problem::{LikelihoodModel, NoisePosterior, SynthesisProblem};
use super::rng::{stream, Purpose};
use crate::diffmath::AdamState;
use crate::distributions::FullCovGaussian;
use crate::error::{DpmsError, Result};
use crate::eval::r_squared;

/// Held-out samples for one instance (properties are the training ones).
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceTest {
    pub x: Array2<f64>,
    pub y: Option<Array2<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefitOptions {
    pub steps: usize,
    pub lr: f64,
}

impl Default for RefitOptions {
    fn default() -> Self {
        Self { steps: 200, lr: 0.01 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestElbo {
    pub elbo: f64,
    /// ELBO divided by the number of test samples.
    pub normalized: f64,
}

/// Predictions with parameters at their posterior means.
pub fn predict_mean(problem: &SynthesisProblem, s: usize, x: &Array2<f64>) -> Result<Array2<f64>> {
    let inst = problem.instance(s);
    let w = inst.weights.means(&problem.store);
    match &problem.layout.model {
        LikelihoodModel::Linear => {
            let omega = if w.nrows() == 1 && w.ncols() == x.ncols() && w.ncols() > 1 { w.t().to_owned() } else { w };
            check_inputs(x, omega.nrows())?;
            Ok(x.dot(&omega))
        }
        LikelihoodModel::Regression(net) => {
            check_inputs(x, w.nrows())?;
            net.predict(&problem.store, &x.dot(&w))
        }
        LikelihoodModel::FactorAnalysis { .. } => {
            Err(DpmsError::Invalid("factor analysis models have no input-output prediction".into()))
        }
    }
}

fn check_inputs(x: &Array2<f64>, d: usize) -> Result<()> {
    if x.ncols() != d {
        return Err(DpmsError::shape("test inputs", &[x.nrows(), d], &[x.nrows(), x.ncols()]));
    }
    Ok(())
}

/// Mean R² of posterior-mean predictions over instances.
pub fn mean_r2(problem: &SynthesisProblem, tests: &[InstanceTest]) -> Result<f64> {
    let mut total = 0.0;
    for (s, t) in tests.iter().enumerate() {
        let y = t.y.as_ref().ok_or_else(|| DpmsError::Invalid("R² needs targets".into()))?;
        total += r_squared(y, &predict_mean(problem, s, &t.x)?)?;
    }
    Ok(total / tests.len() as f64)
}

/// Full-batch training ELBO (c = 1) with noise from the evaluation stream.
pub fn full_elbo(problem: &SynthesisProblem, seed: u64, opts: &ElboOptions) -> Result<StepResult> {
    let batches = vec![None; problem.len()];
    let rngs = problem.streams.iter().map(|&id| stream(seed, id, 0, 0, Purpose::Eval)).collect();
    elbo_step(problem, &batches, rngs, opts, false)
}

/// Posterior over latents under fixed parameters:
/// `Σ = (ΛᵀΨ⁻¹Λ + I)⁻¹`, `ι_i = ΣΛᵀΨ⁻¹(x_i − η)`.
fn analytic_latents(lambda: &Array2<f64>, eta: &Array2<f64>, psi: &Array2<f64>, x: &Array2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
    let (dx, dz) = lambda.dim();
    let l = DMatrix::from_fn(dx, dz, |i, j| lambda[[i, j]]);
    let inv_psi = DVector::from_fn(dx, |i, _| 1.0 / psi[[i, 0]]);
    let lt_psi = DMatrix::from_fn(dz, dx, |j, i| l[(i, j)] * inv_psi[i]);
    let prec = &lt_psi * &l + DMatrix::identity(dz, dz);
    let chol = prec
        .cholesky()
        .ok_or_else(|| DpmsError::Invalid("latent posterior precision is not positive definite".into()))?;
    let cov = chol.inverse();
    let h = cov
        .clone()
        .cholesky()
        .ok_or_else(|| DpmsError::Invalid("latent posterior covariance is not positive definite".into()))?
        .l();
    let n = x.nrows();
    let centered = DMatrix::from_fn(dx, n, |i, t| x[[t, i]] - eta[[i, 0]]);
    let means = &cov * (&lt_psi * centered);
    Ok((
        Array2::from_shape_fn((n, dz), |(t, j)| means[(j, t)]),
        Array2::from_shape_fn((dz, dz), |(i, j)| h[(i, j)]),
    ))
}

/// Per-instance ELBO of held-out data with `c = 1` and `samples` posterior
/// draws. With `refit`, factor-analysis latent posteriors for the test rows
/// are initialized analytically and then optimized with all other
/// parameters held fixed.
pub fn eval_test_elbo(
    problem: &SynthesisProblem,
    tests: &[InstanceTest],
    refit: Option<&RefitOptions>,
    samples: usize,
    seed: u64,
) -> Result<Vec<TestElbo>> {
    if tests.len() != problem.len() {
        return Err(DpmsError::Invalid(format!("{} test sets for {} instances", tests.len(), problem.len())));
    }
    let mut store = problem.store.clone();
    let mut layout = problem.layout.clone();
    let mut data = problem.data.clone();
    let mut fresh = Vec::new();
    for (s, t) in tests.iter().enumerate() {
        data[s].x = t.x.clone();
        data[s].y = t.y.clone();
        let inst = &mut layout.instances[s];
        if let Some(old) = inst.latents {
            let dz = store.values(old.factor).nrows();
            let (mean, factor) = match (refit, inst.offsets, inst.noise) {
                (Some(_), Some(eta), NoisePosterior::Gamma(nu)) => {
                    let lambda = inst.weights.means(&store);
                    let psi = nu.means(&store).mapv(|v| v * v);
                    analytic_latents(&lambda, eta.means(&store), &psi, &t.x)?
                }
                _ => (Array2::zeros((t.x.nrows(), dz)), Array2::eye(dz)),
            };
            let q = FullCovGaussian::new(&mut store, &format!("{}.latents.test", inst.name), mean, factor)?;
            fresh.extend(q.ids());
            inst.latents = Some(q);
        }
    }
    let mut test = SynthesisProblem::assemble(store, layout, data)?;
    if let (Some(opts), false) = (refit, fresh.is_empty()) {
        let ids: Vec<_> = test.store.ids().collect();
        for id in ids {
            test.store.set_frozen(id, !fresh.contains(&id));
        }
        let mut adam = AdamState::new(&test.store);
        let batches = vec![None; test.len()];
        for step in 0..opts.steps {
            let rngs = test
                .streams
                .iter()
                .map(|&id| stream(seed, id, 0, step as u64, Purpose::Refit))
                .collect();
            let r = elbo_step(&test, &batches, rngs, &ElboOptions::default(), true)
                .map_err(|e| DpmsError::Diverged { epoch: step, detail: format!("latent refit: {e}") })?;
            test.store.zero_grads();
            test.store.accumulate(&r.grads)?;
            adam.step(&mut test.store, opts.lr)?;
        }
    }
    let opts = ElboOptions {
        samples,
        sampled_kl: false,
    };
    let r = full_elbo(&test, seed, &opts)?;
    Ok(r.terms
        .iter()
        .zip(tests)
        .map(|(t, d)| TestElbo {
            elbo: t.total,
            normalized: t.total / d.x.nrows() as f64,
        })
        .collect())
}
