use serde::Serialize;

use super::{ParamId, ParamStore, Tape, Var};
use crate::error::{DpmsError, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step, scaled by `max(1, |x|)`.
    pub step: f64,
    /// Magnitude below which errors are measured absolutely.
    pub floor: f64,
    /// Differences within `roundoff · ε · max(1, |f|) / h` of each other are
    /// below what central differences can resolve and count as exact.
    pub roundoff: f64,
    /// Entries checked per block; larger blocks are strided.
    pub max_entries_per_block: usize,
    /// Restrict to these blocks; `None` checks every unfrozen block.
    pub blocks: Option<Vec<ParamId>>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-6,
            roundoff: 100.0,
            max_entries_per_block: 64,
            blocks: None,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct BlockGradCheck {
    pub block: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub worst_entry: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub value: f64,
    pub blocks: Vec<BlockGradCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_err).fold(0.0, f64::max)
    }
}

fn evaluate<F>(store: &ParamStore, objective: &F) -> Result<(Tape, Var)>
where
    F: Fn(&ParamStore, &mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = objective(store, &mut tape)?;
    Ok((tape, out))
}

/// Compares reverse-mode gradients of `objective` with central differences.
///
/// The objective must be a deterministic function of the store (any noise
/// frozen by the caller); two evaluations are compared bitwise first.
pub fn check_gradients<F>(store: &ParamStore, objective: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore, &mut Tape) -> Result<Var>,
{
    let (tape, out) = evaluate(store, &objective)?;
    let value = tape.scalar_value(out);
    let (tape2, out2) = evaluate(store, &objective)?;
    let value2 = tape2.scalar_value(out2);
    if value.to_bits() != value2.to_bits() {
        return Err(DpmsError::Nondeterministic {
            first: value,
            second: value2,
        });
    }
    let grads = tape.gradients(out)?;

    let ids: Vec<ParamId> = match &opts.blocks {
        Some(ids) => ids.clone(),
        None => store.ids().filter(|id| !store.is_frozen(*id)).collect(),
    };
    let mut work = store.clone();
    let mut blocks = Vec::with_capacity(ids.len());
    for id in ids {
        let len = store.block(id).len();
        let stride = len.div_ceil(opts.max_entries_per_block.max(1)).max(1);
        let analytic_block = grads.get(id);
        let mut report = BlockGradCheck {
            block: store.block(id).name().to_string(),
            checked: 0,
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            worst_entry: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for k in (0..len).step_by(stride) {
            let x0 = store.values(id).as_slice().expect("standard layout")[k];
            let h = opts.step * x0.abs().max(1.0);
            let mut at = |x: f64| -> Result<f64> {
                work.values_mut(id).as_slice_mut().expect("standard layout")[k] = x;
                let (t, o) = evaluate(&work, &objective)?;
                Ok(t.scalar_value(o))
            };
            let fp = at(x0 + h)?;
            let fm = at(x0 - h)?;
            at(x0)?;
            let numeric = (fp - fm) / (2.0 * h);
            let analytic = analytic_block.map_or(0.0, |g| g.as_slice().expect("standard layout")[k]);
            let abs = (analytic - numeric).abs();
            let resolvable = opts.roundoff * f64::EPSILON * value.abs().max(1.0) / h;
            let rel = if abs <= resolvable {
                0.0
            } else {
                abs / analytic.abs().max(numeric.abs()).max(opts.floor)
            };
            report.checked += 1;
            report.max_abs_err = report.max_abs_err.max(abs);
            if rel > report.max_rel_err || report.checked == 1 {
                report.max_rel_err = rel;
                report.worst_entry = k;
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
        blocks.push(report);
    }
    Ok(GradCheckReport { value, blocks })
}
