use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::rng::stream_id;
use crate::cpd::{FactorizedGammaCpd, FactorizedGaussianCpd};
use crate::diffmath::{ParamId, ParamStore};
use crate::distributions::{BoundedGamma, FullCovGaussian, MeanFieldGaussian};
use crate::error::{DpmsError, Result};
use crate::models::SharedNet;
use crate::shbf::{GridLayout, Membership};

/// Which ELBO is optimized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectiveKind {
    /// Every parameter is property-predicted; likelihood noise is known.
    Basic,
    /// Factor analysis with per-instance latent posteriors.
    DimReduction,
    /// Property-predicted, shared and instance-specific parameter sets.
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LikelihoodModel {
    /// `y = xᵀθ + noise`.
    Linear,
    /// `y = f(Xω) + noise` with a shared network.
    Regression(SharedNet),
    /// `x = Λz + η + noise`.
    FactorAnalysis { latent_dim: usize },
}

/// Observations and properties of one system instance.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceData {
    pub name: String,
    /// n×d_x inputs (regression) or observations (factor analysis).
    pub x: Array2<f64>,
    /// n×c targets; `None` for factor analysis.
    pub y: Option<Array2<f64>>,
    /// d×r properties, one row per row of the property-predicted parameters.
    pub props: Array2<f64>,
}

impl InstanceData {
    pub fn samples(&self) -> usize {
        self.x.nrows()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PosteriorFamily {
    MeanField,
    FullCov,
}

/// Posterior over the property-predicted parameter matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightPosterior {
    MeanField(MeanFieldGaussian),
    /// One row with a full covariance across its columns.
    FullCov(FullCovGaussian),
}

impl WeightPosterior {
    pub fn ids(&self) -> [ParamId; 2] {
        match self {
            WeightPosterior::MeanField(q) => q.ids(),
            WeightPosterior::FullCov(q) => q.ids(),
        }
    }

    /// Posterior mean, d×m.
    pub fn means(&self, store: &ParamStore) -> Array2<f64> {
        match self {
            WeightPosterior::MeanField(q) => q.means(store).clone(),
            WeightPosterior::FullCov(q) => store.values(q.mean).clone(),
        }
    }

    pub fn shape(&self, store: &ParamStore) -> (usize, usize) {
        match self {
            WeightPosterior::MeanField(q) => q.shape(store),
            WeightPosterior::FullCov(q) => store.values(q.mean).dim(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoisePosterior {
    Known { std: f64 },
    Gamma(BoundedGamma),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoisePrior {
    Known,
    /// Non-conditional Gamma prior shared by all instances (1×c).
    Shared(BoundedGamma),
    /// Property-conditioned Gamma prior, one value per property row.
    Conditional(FactorizedGammaCpd),
}

/// Parameter handles owned by one instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceParams {
    pub name: String,
    pub weights: WeightPosterior,
    pub offsets: Option<MeanFieldGaussian>,
    pub noise: NoisePosterior,
    /// Latent posterior over the training rows (n×d_z means, shared factor).
    pub latents: Option<FullCovGaussian>,
}

/// Serializable description of which store blocks play which role.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProblemLayout {
    pub kind: ObjectiveKind,
    pub model: LikelihoodModel,
    pub weight_cpd: FactorizedGaussianCpd,
    pub offset_cpd: Option<FactorizedGaussianCpd>,
    pub noise_prior: NoisePrior,
    pub instances: Vec<InstanceParams>,
}

/// Whether property-predicted posteriors are free or pinned to the CPD.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PosteriorMode {
    Free,
    TiedToCpd,
}

/// Everything the engine optimizes, together with the data it explains.
#[derive(Clone, Debug)]
pub struct SynthesisProblem {
    pub store: ParamStore,
    pub layout: ProblemLayout,
    pub data: Vec<InstanceData>,
    pub memberships: Vec<Membership>,
    pub streams: Vec<u64>,
    pub mode: PosteriorMode,
}

/// Initial values for regression problems.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegressionInit {
    pub cpd_sigma: f64,
    pub prior_noise_shape: f64,
    pub prior_noise_rate: f64,
    pub posterior_mean_std: f64,
    pub posterior_sigma: f64,
    pub posterior_noise_shape: f64,
    pub posterior_noise_rate: f64,
}

impl Default for RegressionInit {
    fn default() -> Self {
        Self {
            cpd_sigma: 0.01,
            prior_noise_shape: 10.0,
            prior_noise_rate: 1000.0,
            posterior_mean_std: 0.01,
            posterior_sigma: 0.01,
            posterior_noise_shape: 10.0,
            posterior_noise_rate: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionSetup {
    pub layout: GridLayout,
    pub low_dim: usize,
    pub outputs: usize,
    pub input_scale: f64,
    pub init: RegressionInit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearSetup {
    pub layout: GridLayout,
    pub columns: usize,
    pub noise_std: f64,
    pub posterior: PosteriorFamily,
    pub cpd_mean: f64,
    pub cpd_sigma: f64,
    pub posterior_sigma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FaInit {
    pub cpd_sigma: f64,
    pub cpd_noise_shape: f64,
    pub cpd_noise_rate: f64,
    pub posterior_sigma: f64,
    pub posterior_noise_shape: f64,
    pub posterior_noise_rate: f64,
}

impl Default for FaInit {
    fn default() -> Self {
        Self {
            cpd_sigma: 0.01,
            cpd_noise_shape: 10.0,
            cpd_noise_rate: 10.0,
            posterior_sigma: 0.01,
            posterior_noise_shape: 10.0,
            posterior_noise_rate: 10.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaSetup {
    pub layout: GridLayout,
    pub latent_dim: usize,
    pub init: FaInit,
}

fn check_data(data: &[InstanceData], layout: &GridLayout, need_y: bool) -> Result<()> {
    if data.is_empty() {
        return Err(DpmsError::Invalid("a problem needs at least one instance".into()));
    }
    for d in data {
        if d.props.ncols() != layout.dims() {
            return Err(DpmsError::shape(
                format!("{} properties", d.name),
                &[d.props.nrows(), layout.dims()],
                &[d.props.nrows(), d.props.ncols()],
            ));
        }
        match (&d.y, need_y) {
            (Some(y), true) if y.nrows() != d.x.nrows() => {
                return Err(DpmsError::shape(format!("{} targets", d.name), &[d.x.nrows()], &[y.nrows()]));
            }
            (None, true) => return Err(DpmsError::Invalid(format!("{} has no targets", d.name))),
            _ => {}
        }
    }
    Ok(())
}

fn memberships(data: &[InstanceData], layout: &GridLayout) -> Result<Vec<Membership>> {
    data.iter().map(|d| layout.memberships(&d.props)).collect()
}

impl SynthesisProblem {
    /// Projection + shared network regression (full objective).
    pub fn regression<R: Rng>(data: Vec<InstanceData>, setup: &RegressionSetup, rng: &mut R) -> Result<Self> {
        check_data(&data, &setup.layout, true)?;
        for d in &data {
            if d.props.nrows() != d.x.ncols() {
                return Err(DpmsError::shape(format!("{} property rows", d.name), &[d.x.ncols()], &[d.props.nrows()]));
            }
            if d.y.as_ref().map(|y| y.ncols()) != Some(setup.outputs) {
                return Err(DpmsError::Invalid(format!("{} targets must have {} columns", d.name, setup.outputs)));
            }
        }
        let init = &setup.init;
        let mut store = ParamStore::new();
        let weight_cpd = FactorizedGaussianCpd::new(&mut store, "cpd.w", &setup.layout, setup.low_dim, 0.0, init.cpd_sigma)?;
        let c = setup.outputs;
        let prior = BoundedGamma::new(
            &mut store,
            "prior.noise",
            &Array2::from_elem((1, c), init.prior_noise_shape),
            &Array2::from_elem((1, c), init.prior_noise_rate),
        )?;
        let net = SharedNet::new(&mut store, "net", setup.low_dim, c, setup.input_scale, rng)?;
        let mut instances = Vec::with_capacity(data.len());
        for d in &data {
            let dx = d.x.ncols();
            let means = Array2::from_shape_fn((dx, setup.low_dim), |_| init.posterior_mean_std * rng.sample::<f64, _>(StandardNormal));
            let w = MeanFieldGaussian::new(
                &mut store,
                &format!("{}.w", d.name),
                means,
                &Array2::from_elem((dx, setup.low_dim), init.posterior_sigma),
            )?;
            let nu = BoundedGamma::new(
                &mut store,
                &format!("{}.noise", d.name),
                &Array2::from_elem((1, c), init.posterior_noise_shape),
                &Array2::from_elem((1, c), init.posterior_noise_rate),
            )?;
            instances.push(InstanceParams {
                name: d.name.clone(),
                weights: WeightPosterior::MeanField(w),
                offsets: None,
                noise: NoisePosterior::Gamma(nu),
                latents: None,
            });
        }
        let layout = ProblemLayout {
            kind: ObjectiveKind::Full,
            model: LikelihoodModel::Regression(net),
            weight_cpd,
            offset_cpd: None,
            noise_prior: NoisePrior::Shared(prior),
            instances,
        };
        Self::assemble(store, layout, data)
    }

    /// Linear model with known noise (basic objective). Each instance has a
    /// single row of `columns` weights when the posterior is full-covariance.
    pub fn linear(data: Vec<InstanceData>, setup: &LinearSetup) -> Result<Self> {
        check_data(&data, &setup.layout, true)?;
        let mut store = ParamStore::new();
        let weight_cpd =
            FactorizedGaussianCpd::new(&mut store, "cpd.w", &setup.layout, setup.columns, setup.cpd_mean, setup.cpd_sigma)?;
        let mut instances = Vec::with_capacity(data.len());
        for d in &data {
            let rows = d.props.nrows();
            let expected_inputs = rows * setup.columns;
            if d.x.ncols() != expected_inputs && !(rows == 1 && d.x.ncols() == setup.columns) {
                return Err(DpmsError::shape(format!("{} inputs", d.name), &[expected_inputs], &[d.x.ncols()]));
            }
            if d.y.as_ref().map(|y| y.ncols()) != Some(1) {
                return Err(DpmsError::Invalid(format!("{} targets must have one column", d.name)));
            }
            let weights = match setup.posterior {
                PosteriorFamily::MeanField => WeightPosterior::MeanField(MeanFieldGaussian::new(
                    &mut store,
                    &format!("{}.w", d.name),
                    Array2::from_elem((rows, setup.columns), setup.cpd_mean),
                    &Array2::from_elem((rows, setup.columns), setup.posterior_sigma),
                )?),
                PosteriorFamily::FullCov => {
                    if rows != 1 {
                        return Err(DpmsError::Invalid("full-covariance weight posteriors need a single property row".into()));
                    }
                    WeightPosterior::FullCov(FullCovGaussian::new(
                        &mut store,
                        &format!("{}.w", d.name),
                        Array2::from_elem((1, setup.columns), setup.cpd_mean),
                        Array2::eye(setup.columns) * setup.posterior_sigma,
                    )?)
                }
            };
            instances.push(InstanceParams {
                name: d.name.clone(),
                weights,
                offsets: None,
                noise: NoisePosterior::Known { std: setup.noise_std },
                latents: None,
            });
        }
        let layout = ProblemLayout {
            kind: ObjectiveKind::Basic,
            model: LikelihoodModel::Linear,
            weight_cpd,
            offset_cpd: None,
            noise_prior: NoisePrior::Known,
            instances,
        };
        Self::assemble(store, layout, data)
    }

    /// Factor analysis with property-conditioned loadings, offsets and noise.
    pub fn factor_analysis(data: Vec<InstanceData>, setup: &FaSetup) -> Result<Self> {
        check_data(&data, &setup.layout, false)?;
        let init = &setup.init;
        let dz = setup.latent_dim;
        let mut store = ParamStore::new();
        let weight_cpd = FactorizedGaussianCpd::new(&mut store, "cpd.loadings", &setup.layout, dz, 0.0, init.cpd_sigma)?;
        let offset_cpd = FactorizedGaussianCpd::new(&mut store, "cpd.offsets", &setup.layout, 1, 0.0, init.cpd_sigma)?;
        let noise_cpd = FactorizedGammaCpd::new(&mut store, "cpd.noise", &setup.layout, init.cpd_noise_shape, init.cpd_noise_rate)?;
        let mut instances = Vec::with_capacity(data.len());
        for d in &data {
            let (n, dx) = d.x.dim();
            if d.props.nrows() != dx {
                return Err(DpmsError::shape(format!("{} property rows", d.name), &[dx], &[d.props.nrows()]));
            }
            let loadings = MeanFieldGaussian::new(
                &mut store,
                &format!("{}.loadings", d.name),
                Array2::zeros((dx, dz)),
                &Array2::from_elem((dx, dz), init.posterior_sigma),
            )?;
            let offsets = MeanFieldGaussian::new(
                &mut store,
                &format!("{}.offsets", d.name),
                Array2::zeros((dx, 1)),
                &Array2::from_elem((dx, 1), init.posterior_sigma),
            )?;
            let noise = BoundedGamma::new(
                &mut store,
                &format!("{}.noise", d.name),
                &Array2::from_elem((dx, 1), init.posterior_noise_shape),
                &Array2::from_elem((dx, 1), init.posterior_noise_rate),
            )?;
            let latents = FullCovGaussian::new(&mut store, &format!("{}.latents", d.name), Array2::zeros((n, dz)), Array2::eye(dz))?;
            instances.push(InstanceParams {
                name: d.name.clone(),
                weights: WeightPosterior::MeanField(loadings),
                offsets: Some(offsets),
                noise: NoisePosterior::Gamma(noise),
                latents: Some(latents),
            });
        }
        let layout = ProblemLayout {
            kind: ObjectiveKind::DimReduction,
            model: LikelihoodModel::FactorAnalysis { latent_dim: dz },
            weight_cpd,
            offset_cpd: Some(offset_cpd),
            noise_prior: NoisePrior::Conditional(noise_cpd),
            instances,
        };
        Self::assemble(store, layout, data)
    }

    /// Re-attaches data to a stored layout and parameter store.
    pub fn assemble(store: ParamStore, layout: ProblemLayout, data: Vec<InstanceData>) -> Result<Self> {
        if layout.instances.len() != data.len() {
            return Err(DpmsError::Invalid(format!(
                "layout has {} instances, data has {}",
                layout.instances.len(),
                data.len()
            )));
        }
        for (p, d) in layout.instances.iter().zip(&data) {
            if p.name != d.name {
                return Err(DpmsError::Invalid(format!("instance order mismatch: {} vs {}", p.name, d.name)));
            }
            let (rows, _) = p.weights.shape(&store);
            if rows != d.props.nrows() {
                return Err(DpmsError::shape(format!("{} weight rows", d.name), &[d.props.nrows()], &[rows]));
            }
            if let Some(l) = &p.latents {
                if store.values(l.mean).nrows() != d.samples() {
                    return Err(DpmsError::shape(
                        format!("{} latent rows", d.name),
                        &[d.samples()],
                        &[store.values(l.mean).nrows()],
                    ));
                }
            }
        }
        let memberships = memberships(&data, layout.weight_cpd.layout())?;
        let streams = data.iter().map(|d| stream_id(&d.name)).collect();
        Ok(Self {
            store,
            layout,
            data,
            memberships,
            streams,
            mode: PosteriorMode::Free,
        })
    }

    pub fn kind(&self) -> ObjectiveKind {
        self.layout.kind
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn instance(&self, s: usize) -> &InstanceParams {
        &self.layout.instances[s]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.data.iter().position(|d| d.name == name)
    }

    /// Blocks of the CPD fields that set standard deviations of tied posteriors.
    pub fn cpd_sigma_ids(&self) -> Vec<ParamId> {
        let mut ids = self.layout.weight_cpd.sigma_ids();
        if let Some(c) = &self.layout.offset_cpd {
            ids.extend(c.sigma_ids());
        }
        ids
    }

    /// Keeps only the named instance (used for isolated fits).
    pub fn restrict_to(self, s: usize) -> Result<Self> {
        if s >= self.len() {
            return Err(DpmsError::Invalid(format!("instance index {s} out of range")));
        }
        let mut layout = self.layout;
        let keep = layout.instances.swap_remove(s);
        layout.instances = vec![keep];
        let mut data = self.data;
        let d = data.swap_remove(s);
        let mut problem = Self::assemble(self.store, layout, vec![d])?;
        problem.mode = self.mode;
        Ok(problem)
    }
}
