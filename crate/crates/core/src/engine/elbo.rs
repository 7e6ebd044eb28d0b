//! Sampled ELBO for one instance, and the per-step reduction over instances.

use std::sync::Arc;

use ndarray::{Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::rng::{stream, Purpose};
use super::problem::{LikelihoodModel, NoisePosterior, NoisePrior, PosteriorMode, SynthesisProblem, WeightPosterior};
use crate::diffmath::{Gradients, ParamStore, Tape, Var};
use crate::distributions;
use crate::error::{DpmsError, Result};
use crate::models;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ElboOptions {
    /// Posterior draws averaged for the expected log-likelihood.
    pub samples: usize,
    /// Replace analytic Gaussian KLs by single-draw estimates.
    pub sampled_kl: bool,
}

impl Default for ElboOptions {
    fn default() -> Self {
        Self {
            samples: 1,
            sampled_kl: false,
        }
    }
}

/// Per-instance values. `log_lik` and `kl_latent` already carry the
/// minibatch scale `c`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ElboTerms {
    pub scale: f64,
    pub log_lik: f64,
    pub kl_props: f64,
    pub kl_no_props: f64,
    pub kl_latent: f64,
    pub total: f64,
}

fn normals<R: Rng>(rng: &mut R, shape: (usize, usize)) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || rng.sample(StandardNormal))
}

fn finite(name: &str, term: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(DpmsError::NonFinite(format!("instance {name}: {term} = {v}")))
    }
}

/// Records instance `s`'s ELBO on `tape`, reading parameters from `store`
/// (normally `problem.store`). `batch` selects training rows;
/// `None` uses all of them with `c = 1`.
pub fn record_instance(
    tape: &mut Tape,
    store: &ParamStore,
    problem: &SynthesisProblem,
    s: usize,
    batch: Option<&Arc<[usize]>>,
    rng: &mut ChaCha8Rng,
    opts: &ElboOptions,
) -> Result<(Var, ElboTerms)> {
    let layout = &problem.layout;
    let inst = &layout.instances[s];
    let data = &problem.data[s];
    let membership = &problem.memberships[s];
    let tied = problem.mode == PosteriorMode::TiedToCpd;
    let n = data.samples();
    let (x_b, y_b, b) = match batch {
        Some(rows) => {
            if rows.iter().any(|&i| i >= n) {
                return Err(DpmsError::Invalid(format!("batch index out of range for {}", data.name)));
            }
            (
                data.x.select(Axis(0), rows),
                data.y.as_ref().map(|y| y.select(Axis(0), rows)),
                rows.len(),
            )
        }
        None => (data.x.clone(), data.y.clone(), n),
    };
    if b == 0 {
        return Err(DpmsError::Invalid(format!("empty batch for {}", data.name)));
    }
    let scale = n as f64 / b as f64;
    let samples = opts.samples.max(1);

    let cpd_w = layout.weight_cpd.record(tape, store, membership);
    let cpd_eta = layout.offset_cpd.as_ref().map(|c| c.record(tape, store, membership));
    let q_w = match &inst.weights {
        WeightPosterior::MeanField(q) => Ok(q.vars(tape, store)),
        WeightPosterior::FullCov(q) => Err(q.vars(tape, store)),
    };
    let q_eta = inst.offsets.map(|q| q.vars(tape, store));
    let q_nu = match inst.noise {
        NoisePosterior::Gamma(q) => Some(q.vars(tape, store)),
        NoisePosterior::Known { .. } => None,
    };
    let q_z = inst.latents.map(|q| {
        let v = q.vars(tape, store);
        let mean = match batch {
            Some(rows) => tape.select_rows(v.mean, rows.clone()),
            None => v.mean,
        };
        distributions::FullCovVars { mean, factor: v.factor }
    });
    let x = tape.constant(x_b);
    let y = y_b.map(|y| tape.constant(y));

    let mut log_lik: Option<Var> = None;
    let mut sampled_kl: Option<Var> = None;
    let w_shape = tape.shape(cpd_w.mean);
    for _ in 0..samples {
        // weights
        let eps = normals(rng, w_shape);
        let w = if tied {
            distributions::rsample_gaussian(tape, &cpd_w, &eps)?
        } else {
            match &q_w {
                Ok(q) => distributions::rsample_gaussian(tape, q, &eps)?,
                Err(q) => distributions::rsample_full_cov(tape, q, &eps)?,
            }
        };
        if opts.sampled_kl && !tied {
            if let Ok(q) = &q_w {
                let lq = distributions::gaussian_log_prob(tape, q, w)?;
                let lp = distributions::gaussian_log_prob(tape, &cpd_w, w)?;
                let d = tape.sub(lq, lp);
                let d = tape.sum(d);
                sampled_kl = Some(match sampled_kl {
                    Some(acc) => tape.add(acc, d),
                    None => d,
                });
            }
        }
        // offsets
        let eta = match (&cpd_eta, &q_eta) {
            (Some(p), Some(q)) => {
                let eps = normals(rng, tape.shape(p.mean));
                Some(distributions::rsample_gaussian(tape, if tied { p } else { q }, &eps)?)
            }
            _ => None,
        };
        // noise standard deviations
        let nu = match (&inst.noise, &q_nu) {
            (NoisePosterior::Gamma(_), Some(q)) => {
                let eps = normals(rng, tape.shape(q.shape));
                distributions::rsample_gamma(tape, q, &eps)?
            }
            (NoisePosterior::Known { std }, _) => {
                let c = y.map(|y| tape.shape(y).1).unwrap_or(1);
                tape.constant(Array2::from_elem((1, c), *std))
            }
            _ => unreachable!("gamma noise posterior always records vars"),
        };
        let ll = match &layout.model {
            LikelihoodModel::Linear => {
                let (r, c) = tape.shape(w);
                let omega = if r == 1 && c == tape.shape(x).1 && c > 1 { tape.transpose(w) } else { w };
                let y = y.ok_or_else(|| DpmsError::Invalid("linear model needs targets".into()))?;
                models::regression_log_lik(tape, store, None, x, y, omega, nu)?
            }
            LikelihoodModel::Regression(net) => {
                let y = y.ok_or_else(|| DpmsError::Invalid("regression model needs targets".into()))?;
                models::regression_log_lik(tape, store, Some(net), x, y, w, nu)?
            }
            LikelihoodModel::FactorAnalysis { .. } => {
                let qz = q_z.as_ref().ok_or_else(|| DpmsError::Invalid("factor analysis needs latents".into()))?;
                let eps = normals(rng, tape.shape(qz.mean));
                let z = distributions::rsample_full_cov(tape, qz, &eps)?;
                let eta = eta.ok_or_else(|| DpmsError::Invalid("factor analysis needs offsets".into()))?;
                models::fa_log_lik(tape, x, z, w, eta, nu)?
            }
        };
        log_lik = Some(match log_lik {
            Some(acc) => tape.add(acc, ll),
            None => ll,
        });
    }
    let log_lik = tape.scale(log_lik.expect("at least one sample"), scale / samples as f64);

    // property-predicted KL
    let mut kl_props = tape.scalar(0.0);
    if !tied {
        let kl_w = match (&q_w, sampled_kl) {
            (Ok(_), Some(est)) => tape.scale(est, 1.0 / samples as f64),
            (Ok(q), None) => distributions::kl_gaussian(tape, q, &cpd_w)?,
            (Err(q), _) => distributions::kl_full_cov_to_diag(tape, q, &cpd_w)?,
        };
        kl_props = tape.add(kl_props, kl_w);
        if let (Some(p), Some(q)) = (&cpd_eta, &q_eta) {
            let k = distributions::kl_gaussian(tape, q, p)?;
            kl_props = tape.add(kl_props, k);
        }
    }
    let mut kl_no_props = tape.scalar(0.0);
    if let Some(q) = &q_nu {
        match &layout.noise_prior {
            NoisePrior::Shared(p) => {
                let p = p.vars(tape, store);
                kl_no_props = distributions::kl_gamma(tape, q, &p)?;
            }
            NoisePrior::Conditional(cpd) => {
                let p = cpd.record(tape, store, membership);
                let k = distributions::kl_gamma(tape, q, &p)?;
                kl_props = tape.add(kl_props, k);
            }
            NoisePrior::Known => {
                return Err(DpmsError::Config("a Gamma noise posterior needs a Gamma prior".into()));
            }
        }
    }
    let kl_latent = match &q_z {
        Some(q) => {
            let k = distributions::kl_full_cov_rows_to_standard(tape, q);
            tape.scale(k, scale)
        }
        None => tape.scalar(0.0),
    };
    let kl = tape.add(kl_props, kl_no_props);
    let kl = tape.add(kl, kl_latent);
    let total = tape.sub(log_lik, kl);

    let name = &data.name;
    let terms = ElboTerms {
        scale,
        log_lik: finite(name, "log-likelihood", tape.scalar_value(log_lik))?,
        kl_props: finite(name, "KL (property-predicted)", tape.scalar_value(kl_props))?,
        kl_no_props: finite(name, "KL (non-property)", tape.scalar_value(kl_no_props))?,
        kl_latent: finite(name, "KL (latent)", tape.scalar_value(kl_latent))?,
        total: 0.0,
    };
    let terms = ElboTerms {
        total: finite(name, "ELBO", tape.scalar_value(total))?,
        ..terms
    };
    Ok((total, terms))
}

/// Total over instances with merged gradients.
#[derive(Clone, Debug, Default)]
pub struct StepResult {
    pub total: f64,
    pub terms: Vec<ElboTerms>,
    pub grads: Gradients,
}

/// Evaluates every instance (in parallel) and reduces the gradients in
/// instance order. `batches[s] = None` means the full training set.
pub fn elbo_step(
    problem: &SynthesisProblem,
    batches: &[Option<Arc<[usize]>>],
    rngs: Vec<ChaCha8Rng>,
    opts: &ElboOptions,
    with_grad: bool,
) -> Result<StepResult> {
    if batches.len() != problem.len() || rngs.len() != problem.len() {
        return Err(DpmsError::Invalid("one batch and one noise stream per instance are required".into()));
    }
    let parts: Vec<Result<(ElboTerms, Gradients)>> = rngs
        .into_par_iter()
        .enumerate()
        .map(|(s, mut rng)| {
            let mut tape = Tape::new();
            let (out, terms) = record_instance(&mut tape, &problem.store, problem, s, batches[s].as_ref(), &mut rng, opts)?;
            let grads = if with_grad {
                tape.gradients(out)
                    .map_err(|e| DpmsError::NonFinite(format!("instance {}: {e}", problem.data[s].name)))?
            } else {
                Gradients::default()
            };
            Ok((terms, grads))
        })
        .collect();
    let mut result = StepResult::default();
    for part in parts {
        let (terms, grads) = part?;
        result.total += terms.total;
        result.terms.push(terms);
        result.grads.merge(grads);
    }
    Ok(result)
}

/// Sum of all instances' ELBOs on a single tape, with noise drawn from
/// `stream(seed, instance, 0, 0, Noise)`. Used for gradient checks.
pub fn record_total(
    tape: &mut Tape,
    store: &ParamStore,
    problem: &SynthesisProblem,
    batches: &[Option<Arc<[usize]>>],
    seed: u64,
    opts: &ElboOptions,
) -> Result<Var> {
    let mut total = tape.scalar(0.0);
    for s in 0..problem.len() {
        let mut rng = stream(seed, problem.streams[s], 0, 0, Purpose::Noise);
        let (v, _) = record_instance(tape, store, problem, s, batches.get(s).and_then(|b| b.as_ref()), &mut rng, opts)?;
        total = tape.add(total, v);
    }
    Ok(total)
}
