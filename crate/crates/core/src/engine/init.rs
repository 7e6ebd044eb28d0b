//! Constrained posterior initialization: property-predicted posteriors are
//! pinned to the CPD while everything else is optimized, then set equal to
//! the learned CPD.

use ndarray::Array2;

use super::fit::{fit, EarlyStop, FitOutcome, TrainConfig};
use super::problem::{PosteriorMode, SynthesisProblem, WeightPosterior};
use crate::cpd::FactorizedGaussianCpd;
use crate::diffmath::{AdamState, ParamId, ParamStore, Tape};
use crate::distributions::SIGMA_BOUNDS;
use crate::error::{DpmsError, Result};
use crate::shbf::{Membership, ShbfField};

/// Field value for a constant coefficient, computed through the same tape
/// path the objective uses.
fn field_value(field: &ShbfField, store: &ParamStore, membership: &Membership) -> f64 {
    let mut tape = Tape::new();
    let v = field.record(&mut tape, store, membership);
    tape.value(v)[[0, 0]]
}

/// Sets a σ field to a constant near `target` that the posterior σ transform
/// reproduces bit-exactly, returning the raw posterior value.
fn pin_sigma_field(store: &mut ParamStore, field: &ShbfField, membership: &Membership, target: f64) -> Result<f64> {
    let k = field.layout.cardinality() as f64;
    let hit = |store: &mut ParamStore, c: f64| -> Option<(f64, f64)> {
        store.values_mut(field.coefficients).fill(c);
        let y = field_value(field, store, membership);
        match SIGMA_BOUNDS.try_exact(y) {
            Ok(Ok(raw)) => Some((y, raw)),
            _ => None,
        }
    };
    // coarse coefficients: walk the coefficient itself
    let start = field.transform.inverse(target)? / k;
    let (mut up, mut down) = (start, start);
    for _ in 0..1024 {
        for c in [up, down] {
            if let Some((_, raw)) = hit(store, c) {
                return Ok(raw);
            }
        }
        up = up.next_up();
        down = down.next_down();
    }
    // fine coefficients: walk representable targets, then the coefficients mapping onto them
    let (mut yu, mut yd) = (target, target);
    for _ in 0..1024 {
        for y in [yu, yd] {
            if !matches!(SIGMA_BOUNDS.try_exact(y), Ok(Ok(_))) {
                continue;
            }
            let Ok(raw_field) = field.transform.inverse(y) else { continue };
            let (mut cu, mut cd) = (raw_field / k, raw_field / k);
            for _ in 0..256 {
                for c in [cu, cd] {
                    if let Some((got, raw)) = hit(store, c) {
                        if got == y {
                            return Ok(raw);
                        }
                    }
                }
                cu = cu.next_up();
                cd = cd.next_down();
            }
        }
        yu = yu.next_up();
        yd = yd.next_down();
    }
    Err(DpmsError::Invalid(format!("no exactly representable CPD standard deviation near {target}")))
}

/// Pins every σ field of `cpd` to a constant and returns the raw posterior
/// value per column.
fn pin_cpd(store: &mut ParamStore, cpd: &FactorizedGaussianCpd, membership: &Membership) -> Result<Vec<f64>> {
    cpd.sigmas
        .iter()
        .map(|f| {
            // all coefficients equal: any point sees the same value
            let target = field_value(f, store, membership);
            pin_sigma_field(store, f, membership, target)
        })
        .collect()
}

/// Copies the CPD at an instance's properties into a mean-field posterior.
fn copy_cpd(store: &mut ParamStore, cpd: &FactorizedGaussianCpd, membership: &Membership, mean: ParamId, raw_sigma: ParamId, raw: &[f64]) -> Result<()> {
    let (mu, _) = cpd.parameters(store, membership);
    let rows = mu.nrows();
    let raw_block = Array2::from_shape_fn((rows, raw.len()), |(_, j)| raw[j]);
    store.set_values(mean, mu)?;
    store.set_values(raw_sigma, raw_block)
}

/// Runs the constrained phase with `config` (early stopping is ignored),
/// then sets each property-predicted posterior equal to the CPD.
pub fn constrained_posterior_init(problem: &mut SynthesisProblem, config: &TrainConfig) -> Result<FitOutcome> {
    let probe = problem
        .memberships
        .first()
        .cloned()
        .ok_or_else(|| DpmsError::Invalid("no instances".into()))?;
    let sigma_ids = problem.cpd_sigma_ids();
    let was_frozen: Vec<bool> = sigma_ids.iter().map(|&id| problem.store.is_frozen(id)).collect();
    let raw_w = pin_cpd(&mut problem.store, &problem.layout.weight_cpd, &probe)?;
    let raw_eta = match &problem.layout.offset_cpd {
        Some(c) => Some(pin_cpd(&mut problem.store, c, &probe)?),
        None => None,
    };
    for &id in &sigma_ids {
        problem.store.set_frozen(id, true);
    }
    problem.mode = PosteriorMode::TiedToCpd;
    let mut cfg = config.clone();
    cfg.early_stop = EarlyStop::None;
    let mut adam = AdamState::new(&problem.store);
    let outcome = fit(problem, &mut adam, &cfg, 0, None);
    problem.mode = PosteriorMode::Free;
    for (&id, &f) in sigma_ids.iter().zip(&was_frozen) {
        problem.store.set_frozen(id, f);
    }
    let outcome = outcome?;

    for s in 0..problem.len() {
        let inst = problem.layout.instances[s].clone();
        let membership = problem.memberships[s].clone();
        match inst.weights {
            WeightPosterior::MeanField(q) => {
                copy_cpd(&mut problem.store, &problem.layout.weight_cpd, &membership, q.mean, q.raw_sigma, &raw_w)?;
            }
            WeightPosterior::FullCov(q) => {
                let (mu, sd) = problem.layout.weight_cpd.parameters(&problem.store, &membership);
                let d = sd.ncols();
                let factor = Array2::from_shape_fn((d, d), |(i, j)| if i == j { sd[[0, j]] } else { 0.0 });
                problem.store.set_values(q.mean, mu)?;
                problem.store.set_values(q.factor, factor)?;
            }
        }
        if let (Some(q), Some(cpd), Some(raw)) = (inst.offsets, &problem.layout.offset_cpd, &raw_eta) {
            copy_cpd(&mut problem.store, cpd, &membership, q.mean, q.raw_sigma, raw)?;
        }
    }
    Ok(outcome)
}
