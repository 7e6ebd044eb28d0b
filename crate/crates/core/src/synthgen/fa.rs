//! Several instances sharing a property-conditioned factor-analysis model,
//! each observed under every one of a few latent regimes.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::dataset::{Dataset, DatasetInstance};
use super::{item_rng, GroundTruthCpd, ScaleSpec};
use crate::error::{DpmsError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FaSpec {
    pub instances: usize,
    pub neurons: (f64, f64),
    pub latent_dim: usize,
    pub regimes: usize,
    /// Samples per regime and split.
    pub train_samples: usize,
    pub validation_samples: usize,
    pub test_samples: usize,
    pub bumps: usize,
    pub loading_magnitude_std: f64,
    pub loading_std_magnitude_std: f64,
    pub loading_std_floor: f64,
    pub noise_shape: f64,
    pub noise_rate: f64,
    /// Mean of the dominant latent in its own regime.
    pub regime_offset: f64,
    /// Latent standard deviation outside a regime's own dimensions.
    pub inactive_std: f64,
}

impl Default for FaSpec {
    fn default() -> Self {
        Self {
            instances: 3,
            neurons: (800.0, 1000.0),
            latent_dim: 10,
            regimes: 3,
            train_samples: 400,
            validation_samples: 100,
            test_samples: 200,
            bumps: 50,
            loading_magnitude_std: 1.0,
            loading_std_magnitude_std: 0.05,
            loading_std_floor: 0.01,
            noise_shape: 10.0,
            noise_rate: 10.0,
            regime_offset: 4.0,
            inactive_std: 0.1,
        }
    }
}

/// Latent law of one regime: independent Gaussians.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Regime {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Latent dimensions this regime excites.
    pub dims: Vec<usize>,
}

impl FaSpec {
    pub fn validate(&self) -> Result<()> {
        if self.regimes == 0 || self.regimes > self.latent_dim {
            return Err(DpmsError::Invalid(format!(
                "{} regimes cannot partition {} latent dimensions",
                self.regimes, self.latent_dim
            )));
        }
        if self.instances == 0 {
            return Err(DpmsError::Invalid("FA scenario needs at least one instance".into()));
        }
        Ok(())
    }

    /// Contiguous groups of latent dimensions, the first of each dominant.
    pub fn regime_laws(&self) -> Vec<Regime> {
        (0..self.regimes)
            .map(|r| {
                let lo = r * self.latent_dim / self.regimes;
                let hi = (r + 1) * self.latent_dim / self.regimes;
                let dims: Vec<usize> = (lo..hi).collect();
                let mut mean = vec![0.0; self.latent_dim];
                mean[lo] = self.regime_offset;
                let std = (0..self.latent_dim)
                    .map(|j| if (lo..hi).contains(&j) { 1.0 } else { self.inactive_std })
                    .collect();
                Regime { mean, std, dims }
            })
            .collect()
    }
}

/// Property-conditioned law of every parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaGroundTruth {
    /// One field per latent dimension.
    pub loadings: Vec<GroundTruthCpd>,
    pub offsets: GroundTruthCpd,
    pub noise_shape: f64,
    pub noise_rate: f64,
}

impl FaGroundTruth {
    pub fn random(spec: &FaSpec, seed: u64) -> Self {
        let mut rng = item_rng(seed, u64::MAX, 1);
        let mut field = || {
            GroundTruthCpd::random(
                &mut rng,
                spec.bumps,
                3,
                spec.loading_magnitude_std,
                spec.loading_std_magnitude_std,
                spec.loading_std_floor,
            )
        };
        let loadings = (0..spec.latent_dim).map(|_| field()).collect();
        let offsets = field();
        Self {
            loadings,
            offsets,
            noise_shape: spec.noise_shape,
            noise_rate: spec.noise_rate,
        }
    }

    /// Conditional means of the loadings at `props`, d × d_z.
    pub fn mean_loadings(&self, props: &Array2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((props.nrows(), self.loadings.len()));
        for (j, f) in self.loadings.iter().enumerate() {
            out.column_mut(j).assign(&Array1::from(f.mean.evaluate(props)));
        }
        out
    }

    /// One draw of (loadings, offsets, noise std) given `props`.
    pub fn sample<R: Rng>(&self, props: &Array2<f64>, rng: &mut R) -> Result<(Array2<f64>, Array1<f64>, Array1<f64>)> {
        let d = props.nrows();
        let mut loadings = Array2::zeros((d, self.loadings.len()));
        for (j, f) in self.loadings.iter().enumerate() {
            loadings.column_mut(j).assign(&Array1::from(f.sample(rng, props)));
        }
        let offsets = Array1::from(self.offsets.sample(rng, props));
        let gamma = Gamma::new(self.noise_shape, 1.0 / self.noise_rate).map_err(|e| DpmsError::Invalid(e.to_string()))?;
        let noise = Array1::from_shape_fn(d, |_| rng.sample(gamma));
        Ok((loadings, offsets, noise))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegimeData {
    /// n × d_x observations.
    pub train: Array2<f64>,
    pub validation: Array2<f64>,
    pub test: Array2<f64>,
    /// Latents behind `train`, n × d_z.
    pub train_latents: Array2<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FaInstance {
    pub index: usize,
    pub name: String,
    /// d_x × 3
    pub props: Array2<f64>,
    pub loadings: Array2<f64>,
    pub offsets: Array1<f64>,
    pub noise_std: Array1<f64>,
    pub regimes: Vec<RegimeData>,
}

#[derive(Clone, Debug)]
pub struct FaScenario {
    pub spec: FaSpec,
    pub scale: ScaleSpec,
    pub seed: u64,
    pub truth: FaGroundTruth,
    pub laws: Vec<Regime>,
    pub instances: Vec<FaInstance>,
}

fn observe<R: Rng>(inst: &FaInstance, law: &Regime, n: usize, rng: &mut R) -> (Array2<f64>, Array2<f64>) {
    let dz = law.mean.len();
    let z = Array2::from_shape_fn((n, dz), |(_, j)| law.mean[j] + law.std[j] * rng.sample::<f64, _>(StandardNormal));
    let mut x = z.dot(&inst.loadings.t());
    for mut row in x.axis_iter_mut(Axis(0)) {
        for (i, v) in row.iter_mut().enumerate() {
            *v += inst.offsets[i] + inst.noise_std[i] * rng.sample::<f64, _>(StandardNormal);
        }
    }
    (x, z)
}

pub fn fa_instance_name(index: usize) -> String {
    format!("animal{index}")
}

/// `spec.instances` instances (scaled), each with data from every regime.
pub fn gen_fa_multibehavior(spec: &FaSpec, seed: u64, scale: &ScaleSpec) -> Result<FaScenario> {
    spec.validate()?;
    scale.validate()?;
    let truth = FaGroundTruth::random(spec, seed);
    let laws = spec.regime_laws();
    let count = ScaleSpec::count(scale.instances, spec.instances);
    let mut instances = Vec::with_capacity(count);
    for index in 0..count {
        let mut rng = item_rng(seed, index as u64, 0);
        let (lo, hi) = ScaleSpec::range(scale.neurons, spec.neurons);
        let d = rng.random_range(lo.round() as usize..=hi.round() as usize);
        let props = Array2::from_shape_simple_fn((d, 3), || rng.random_range(0.0..1.0));
        let (loadings, offsets, noise_std) = truth.sample(&props, &mut rng)?;
        let mut inst = FaInstance {
            index,
            name: fa_instance_name(index),
            props,
            loadings,
            offsets,
            noise_std,
            regimes: Vec::new(),
        };
        let count = |n| ScaleSpec::count(scale.samples, n);
        for (r, law) in laws.iter().enumerate() {
            let mut rng = item_rng(seed, index as u64, 1 + r as u64);
            let (train, train_latents) = observe(&inst, law, count(spec.train_samples), &mut rng);
            let (validation, _) = observe(&inst, law, count(spec.validation_samples), &mut rng);
            let (test, _) = observe(&inst, law, count(spec.test_samples), &mut rng);
            inst.regimes.push(RegimeData {
                train,
                validation,
                test,
                train_latents,
            });
        }
        instances.push(inst);
    }
    Ok(FaScenario {
        spec: spec.clone(),
        scale: *scale,
        seed,
        truth,
        laws,
        instances,
    })
}

impl FaScenario {
    pub const EXPERIMENT: &'static str = "fa-db-sb";

    pub fn to_dataset(&self) -> Dataset {
        let instances = self
            .instances
            .iter()
            .map(|s| {
                let mut inst = DatasetInstance::new(&s.name, json!({ "index": s.index }));
                inst.insert("props", s.props.clone());
                inst.insert("loadings", s.loadings.clone());
                inst.insert("offsets", s.offsets.clone().insert_axis(Axis(1)));
                inst.insert("noise_std", s.noise_std.clone().insert_axis(Axis(1)));
                for (r, data) in s.regimes.iter().enumerate() {
                    inst.insert(format!("regime{r}.train.x"), data.train.clone());
                    inst.insert(format!("regime{r}.train.z"), data.train_latents.clone());
                    inst.insert(format!("regime{r}.validation.x"), data.validation.clone());
                    inst.insert(format!("regime{r}.test.x"), data.test.clone());
                }
                inst
            })
            .collect();
        Dataset {
            experiment: Self::EXPERIMENT.to_string(),
            seed: self.seed,
            meta: json!({ "spec": self.spec, "scale": self.scale, "truth": self.truth, "laws": self.laws }),
            instances,
        }
    }

    pub fn from_dataset(ds: &Dataset) -> Result<Self> {
        ds.expect_experiment(Self::EXPERIMENT)?;
        let spec: FaSpec = serde_json::from_value(ds.meta["spec"].clone())?;
        let laws: Vec<Regime> = serde_json::from_value(ds.meta["laws"].clone())?;
        let instances = ds
            .instances
            .iter()
            .map(|inst| {
                let regimes = (0..laws.len())
                    .map(|r| {
                        Ok(RegimeData {
                            train: inst.tensor(&format!("regime{r}.train.x"))?.clone(),
                            validation: inst.tensor(&format!("regime{r}.validation.x"))?.clone(),
                            test: inst.tensor(&format!("regime{r}.test.x"))?.clone(),
                            train_latents: inst.tensor(&format!("regime{r}.train.z"))?.clone(),
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(FaInstance {
                    index: serde_json::from_value(inst.meta["index"].clone())?,
                    name: inst.name.clone(),
                    props: inst.tensor("props")?.clone(),
                    loadings: inst.tensor("loadings")?.clone(),
                    offsets: inst.tensor("offsets")?.column(0).to_owned(),
                    noise_std: inst.tensor("noise_std")?.column(0).to_owned(),
                    regimes,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            spec,
            scale: serde_json::from_value(ds.meta["scale"].clone())?,
            seed: ds.seed,
            truth: serde_json::from_value(ds.meta["truth"].clone())?,
            laws,
            instances,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Two-sample Kolmogorov–Smirnov p-value (asymptotic).
    fn ks_p_value(mut a: Vec<f64>, mut b: Vec<f64>) -> f64 {
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        let (n, m) = (a.len() as f64, b.len() as f64);
        let (mut i, mut j, mut d) = (0, 0, 0.0f64);
        while i < a.len() && j < b.len() {
            let x = a[i].min(b[j]);
            while i < a.len() && a[i] <= x {
                i += 1;
            }
            while j < b.len() && b[j] <= x {
                j += 1;
            }
            d = d.max((i as f64 / n - j as f64 / m).abs());
        }
        let en = (n * m / (n + m)).sqrt();
        let lambda = (en + 0.12 + 0.11 / en) * d;
        let mut p = 0.0;
        for k in 1..100 {
            let kf = k as f64;
            p += 2.0 * (-1.0f64).powi(k - 1) * (-2.0 * kf * kf * lambda * lambda).exp();
        }
        p.clamp(0.0, 1.0)
    }

    #[test]
    fn matched_properties_share_the_conditional_law() {
        let spec = FaSpec::default();
        let truth = FaGroundTruth::random(&spec, 8);
        let props = ndarray::array![[0.2, 0.7, 0.4], [0.9, 0.1, 0.5]];
        let mut ra = ChaCha8Rng::seed_from_u64(1);
        let mut rb = ChaCha8Rng::seed_from_u64(2);
        let draws = |rng: &mut ChaCha8Rng| (0..1000).map(|_| truth.sample(&props, rng).unwrap().0[[1, 3]]).collect::<Vec<_>>();
        let a = draws(&mut ra);
        let b = draws(&mut rb);
        assert!(ks_p_value(a, b) > 0.01);
    }

    #[test]
    fn ks_detects_a_shift() {
        let a: Vec<f64> = (0..1000).map(|i| i as f64 / 1000.0).collect();
        let b: Vec<f64> = a.iter().map(|v| v + 0.2).collect();
        assert!(ks_p_value(a, b) < 1e-6);
    }

    #[test]
    fn regimes_are_disjoint() {
        let spec = FaSpec::default();
        let laws = spec.regime_laws();
        assert_eq!(laws.len(), 3);
        for (r, law) in laws.iter().enumerate() {
            let dominant = law.dims[0];
            for (q, other) in laws.iter().enumerate() {
                if q != r {
                    assert!(law.mean[dominant] - other.mean[dominant] >= 4.0);
                    assert!(other.dims.iter().all(|d| !law.dims.contains(d)));
                }
            }
        }
    }

    #[test]
    fn default_dimensions() {
        let spec = FaSpec {
            train_samples: 10,
            validation_samples: 5,
            test_samples: 5,
            ..FaSpec::default()
        };
        let sc = gen_fa_multibehavior(&spec, 3, &ScaleSpec::FULL).unwrap();
        assert_eq!(sc.instances.len(), 3);
        for inst in &sc.instances {
            let d = inst.props.nrows();
            assert!((800..=1000).contains(&d));
            assert_eq!(inst.loadings.dim(), (d, 10));
            assert_eq!(inst.regimes.len(), 3);
            assert_eq!(inst.regimes[0].train.dim(), (10, d));
        }
        let again = FaScenario::from_dataset(&sc.to_dataset()).unwrap();
        assert_eq!(again.instances, sc.instances);
    }
}
