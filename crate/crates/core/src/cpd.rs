//! Conditional prior distributions over per-instance parameter matrices.
//!
//! A d×m parameter matrix gets one (mean, σ) field pair per column, each
//! evaluated at the d property rows; entries are independent given the
//! properties. [`MixtureOracle`] gives the label-conditional equal-weight
//! mixture of posteriors that optimally explains frozen posteriors.

use std::collections::BTreeMap;
use std::fmt::Debug;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::diffmath::{ParamId, ParamStore, Tape, Var};
use crate::distributions::{self, GammaVars, GaussianVars, MeanFieldGaussian, RATE_BOUNDS, SHAPE_BOUNDS};
use crate::error::{DpmsError, Result};
use crate::shbf::{FieldTransform, GridLayout, Membership, ShbfField};
use crate::special::LN_2PI;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorizedGaussianCpd {
    pub means: Vec<ShbfField>,
    pub sigmas: Vec<ShbfField>,
}

impl FactorizedGaussianCpd {
    /// `columns` field pairs named `<name>.mu.<j>` / `<name>.sigma.<j>`,
    /// initialized to constant mean `mean` and standard deviation `sigma`.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        layout: &GridLayout,
        columns: usize,
        mean: f64,
        sigma: f64,
    ) -> Result<Self> {
        let mut means = Vec::with_capacity(columns);
        let mut sigmas = Vec::with_capacity(columns);
        for j in 0..columns {
            means.push(ShbfField::new(store, &format!("{name}.mu.{j}"), layout.clone(), FieldTransform::Identity, mean)?);
            sigmas.push(ShbfField::new(
                store,
                &format!("{name}.sigma.{j}"),
                layout.clone(),
                FieldTransform::Positive,
                sigma,
            )?);
        }
        Ok(Self { means, sigmas })
    }

    pub fn columns(&self) -> usize {
        self.means.len()
    }

    pub fn layout(&self) -> &GridLayout {
        &self.means[0].layout
    }

    pub fn sigma_ids(&self) -> Vec<ParamId> {
        self.sigmas.iter().map(|f| f.coefficients).collect()
    }

    pub fn mean_ids(&self) -> Vec<ParamId> {
        self.means.iter().map(|f| f.coefficients).collect()
    }

    /// Field-evaluated (mean, σ) for each property row: d×m each.
    pub fn record(&self, tape: &mut Tape, store: &ParamStore, membership: &Membership) -> GaussianVars {
        let mu: Vec<Var> = self.means.iter().map(|f| f.record(tape, store, membership)).collect();
        let sd: Vec<Var> = self.sigmas.iter().map(|f| f.record(tape, store, membership)).collect();
        let (mean, std) = if mu.len() == 1 {
            (mu[0], sd[0])
        } else {
            (tape.concat_cols(&mu), tape.concat_cols(&sd))
        };
        GaussianVars { mean, std }
    }

    /// Numeric (mean, σ) matrices at precomputed memberships.
    pub fn parameters(&self, store: &ParamStore, membership: &Membership) -> (Array2<f64>, Array2<f64>) {
        let d = membership.points;
        let m = self.columns();
        let mut mean = Array2::zeros((d, m));
        let mut std = Array2::zeros((d, m));
        for j in 0..m {
            mean.column_mut(j).assign(&self.means[j].evaluate_membership(store, membership).column(0));
            std.column_mut(j).assign(&self.sigmas[j].evaluate_membership(store, membership).column(0));
        }
        (mean, std)
    }

    /// Numeric (mean, σ) at arbitrary property rows.
    pub fn at(&self, store: &ParamStore, props: &Array2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        let m = self.layout().memberships(props)?;
        Ok(self.parameters(store, &m))
    }

    pub fn mean_at(&self, store: &ParamStore, props: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(self.at(store, props)?.0)
    }

    fn check_rows(&self, theta: (usize, usize), props: &Array2<f64>) -> Result<()> {
        if theta.0 != props.nrows() || theta.1 != self.columns() {
            return Err(DpmsError::shape(
                "parameter matrix vs properties",
                &[props.nrows(), self.columns()],
                &[theta.0, theta.1],
            ));
        }
        Ok(())
    }

    /// Log density of a d×m matrix given its d×r properties.
    pub fn log_prob(&self, store: &ParamStore, theta: &Array2<f64>, props: &Array2<f64>) -> Result<f64> {
        self.check_rows(theta.dim(), props)?;
        let m = self.layout().memberships(props)?;
        let mut tape = Tape::new();
        let p = self.record(&mut tape, store, &m);
        let x = tape.constant(theta.clone());
        let lp = distributions::gaussian_log_prob(&mut tape, &p, x)?;
        let total = tape.sum(lp);
        Ok(tape.scalar_value(total))
    }

    /// `KL(q ‖ p(·|M))` for a mean-field posterior of matching shape.
    pub fn kl_from(&self, store: &ParamStore, q: &MeanFieldGaussian, props: &Array2<f64>) -> Result<f64> {
        self.check_rows(q.shape(store), props)?;
        let m = self.layout().memberships(props)?;
        let mut tape = Tape::new();
        let p = self.record(&mut tape, store, &m);
        let qv = q.vars(&mut tape, store);
        let kl = distributions::kl_gaussian(&mut tape, &qv, &p)?;
        Ok(tape.scalar_value(kl))
    }

    /// `mean + σ·noise` at the properties; `noise` is d×m.
    pub fn sample(&self, store: &ParamStore, props: &Array2<f64>, noise: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_rows(noise.dim(), props)?;
        let m = self.layout().memberships(props)?;
        let (mean, std) = self.parameters(store, &m);
        Ok(mean + std * noise)
    }
}

/// Gamma CPD over one positive value per property row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorizedGammaCpd {
    pub shape: ShbfField,
    pub rate: ShbfField,
}

impl FactorizedGammaCpd {
    pub fn new(store: &mut ParamStore, name: &str, layout: &GridLayout, shape: f64, rate: f64) -> Result<Self> {
        Ok(Self {
            shape: ShbfField::new(
                store,
                &format!("{name}.shape"),
                layout.clone(),
                FieldTransform::bounded(SHAPE_BOUNDS),
                shape,
            )?,
            rate: ShbfField::new(
                store,
                &format!("{name}.rate"),
                layout.clone(),
                FieldTransform::bounded(RATE_BOUNDS),
                rate,
            )?,
        })
    }

    pub fn record(&self, tape: &mut Tape, store: &ParamStore, membership: &Membership) -> GammaVars {
        GammaVars {
            shape: self.shape.record(tape, store, membership),
            rate: self.rate.record(tape, store, membership),
        }
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.shape.coefficients, self.rate.coefficients]
    }
}

/// Univariate-per-entry Gaussian used by the mixture oracle.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagGaussian {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl DiagGaussian {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() || mean.is_empty() {
            return Err(DpmsError::shape("diagonal Gaussian", &[mean.len()], &[std.len()]));
        }
        if std.iter().any(|&s| !(s > 0.0)) {
            return Err(DpmsError::Invalid("standard deviations must be positive".into()));
        }
        Ok(Self { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(&x, (&m, &s))| {
                let z = (x - m) / s;
                -0.5 * z * z - s.ln() - 0.5 * LN_2PI
            })
            .sum()
    }
}

/// Label-conditional equal-weight mixtures of posteriors.
#[derive(Clone, Debug)]
pub struct MixtureOracle<L: Ord + Clone + Debug> {
    groups: BTreeMap<L, Vec<DiagGaussian>>,
}

impl<L: Ord + Clone + Debug> MixtureOracle<L> {
    pub fn new(posteriors: &[DiagGaussian], labels: &[L]) -> Result<Self> {
        if posteriors.len() != labels.len() {
            return Err(DpmsError::shape("posteriors vs labels", &[labels.len()], &[posteriors.len()]));
        }
        let mut groups: BTreeMap<L, Vec<DiagGaussian>> = BTreeMap::new();
        for (p, l) in posteriors.iter().zip(labels) {
            groups.entry(l.clone()).or_default().push(p.clone());
        }
        Ok(Self { groups })
    }

    pub fn labels(&self) -> impl Iterator<Item = &L> {
        self.groups.keys()
    }

    pub fn components(&self, label: &L) -> Result<&[DiagGaussian]> {
        match self.groups.get(label) {
            Some(g) if !g.is_empty() => Ok(g),
            _ => Err(DpmsError::EmptyGroup(format!("{label:?}"))),
        }
    }

    /// Density of `x` under the equal-weight mixture for `label`.
    pub fn density(&self, label: &L, x: &[f64]) -> Result<f64> {
        let comps = self.components(label)?;
        let w = vec![1.0 / comps.len() as f64; comps.len()];
        mixture_density(comps, &w, x)
    }
}

/// Density of a weighted mixture; weights must be non-negative and sum to 1.
pub fn mixture_density(components: &[DiagGaussian], weights: &[f64], x: &[f64]) -> Result<f64> {
    if components.len() != weights.len() {
        return Err(DpmsError::shape("mixture weights", &[components.len()], &[weights.len()]));
    }
    if components.is_empty() {
        return Err(DpmsError::EmptyGroup("mixture".into()));
    }
    Ok(components
        .iter()
        .zip(weights)
        .map(|(c, &w)| w * c.log_density(x).exp())
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::AdamState;
    use ndarray::array;

    fn layout() -> GridLayout {
        GridLayout::uniform(&[0.0, 0.0], &[1.0, 1.0], &[4, 4], 0.5).unwrap()
    }

    #[test]
    fn constant_fields_give_standard_normal_density() {
        let mut store = ParamStore::new();
        let cpd = FactorizedGaussianCpd::new(&mut store, "w", &layout(), 2, 0.0, 1.0).unwrap();
        let props = array![[0.1, 0.2], [0.7, 0.4], [0.5, 0.9]];
        let lp = cpd.log_prob(&store, &Array2::zeros((3, 2)), &props).unwrap();
        assert!((lp + 6.0 * 0.5 * LN_2PI).abs() < 1e-12);
        assert!(cpd.log_prob(&store, &Array2::zeros((2, 2)), &props).is_err());
    }

    #[test]
    fn kl_zero_when_posterior_copies_cpd() {
        let mut store = ParamStore::new();
        let cpd = FactorizedGaussianCpd::new(&mut store, "w", &layout(), 1, 0.3, 0.5).unwrap();
        let props = array![[0.1, 0.2], [0.7, 0.4]];
        let m = cpd.layout().memberships(&props).unwrap();
        let (mean, std) = cpd.parameters(&store, &m);
        let q = MeanFieldGaussian::new(&mut store, "q", mean, &std).unwrap();
        assert!(cpd.kl_from(&store, &q, &props).unwrap().abs() < 1e-25);
    }

    #[test]
    fn mixture_of_identical_posteriors_is_that_posterior() {
        let p = DiagGaussian::new(vec![0.5], vec![1.3]).unwrap();
        let oracle = MixtureOracle::new(&[p.clone(), p.clone()], &["a", "a"]).unwrap();
        for &x in &[-2.0, 0.0, 0.5, 3.0] {
            assert!((oracle.density(&"a", &[x]).unwrap() - p.log_density(&[x]).exp()).abs() < 1e-15);
        }
        assert!(matches!(oracle.density(&"b", &[0.0]), Err(DpmsError::EmptyGroup(_))));
    }

    #[test]
    fn gradient_trained_gaussian_matches_mixture_moments() {
        // frozen posteriors for one label; a trainable Gaussian minimizing the
        // summed KL should land on the moment-matched mixture
        let means = [-2.0, 2.0, 0.5];
        let sds = [1.0, 0.5, 0.8];
        let mut store = ParamStore::new();
        let mu = store.add("mu", array![[0.3]]).unwrap();
        let log_sd = store.add("log_sd", array![[0.0]]).unwrap();
        let mut adam = AdamState::new(&store);
        for _ in 0..4000 {
            store.zero_grads();
            let mut tape = Tape::new();
            let m = tape.param(&store, mu);
            let l = tape.param(&store, log_sd);
            let s = tape.exp(l);
            let p = GaussianVars {
                mean: tape.broadcast_rows(m, 3),
                std: tape.broadcast_rows(s, 3),
            };
            let q = GaussianVars {
                mean: tape.constant(Array2::from_shape_vec((3, 1), means.to_vec()).unwrap()),
                std: tape.constant(Array2::from_shape_vec((3, 1), sds.to_vec()).unwrap()),
            };
            let kl = distributions::kl_gaussian(&mut tape, &q, &p).unwrap();
            let obj = tape.neg(kl);
            crate::diffmath::backward(&tape, obj, &mut store).unwrap();
            adam.step(&mut store, 0.01).unwrap();
        }
        let mix_mean = means.iter().sum::<f64>() / 3.0;
        let mix_var = means
            .iter()
            .zip(&sds)
            .map(|(m, s)| s * s + (m - mix_mean) * (m - mix_mean))
            .sum::<f64>()
            / 3.0;
        let fit_mean = store.values(mu)[[0, 0]];
        let fit_var = (2.0 * store.values(log_sd)[[0, 0]]).exp();
        assert!((fit_mean - mix_mean).abs() < 1e-2, "{fit_mean} vs {mix_mean}");
        assert!((fit_var / mix_var - 1.0).abs() < 0.05, "{fit_var} vs {mix_var}");
    }
}
