//! Simulated brains: a projection into a 1-D shared space followed by a
//! conserved nonlinearity, with a rotating half-plane of silent neurons.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::dataset::{Dataset, DatasetInstance};
use super::{item_rng, GroundTruthCpd};
use crate::error::{DpmsError, Result};

/// Conserved mapping from the shared variable to behavior.
pub fn shared_function(l: f64) -> f64 {
    (3.0 * l).sin() + l
}

/// Full-scale ecosystem parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimBrainSpec {
    pub instances: usize,
    pub neurons: (f64, f64),
    pub samples: (f64, f64),
    pub noise_shape: f64,
    pub noise_rate: f64,
    pub validation_samples: usize,
    pub test_samples: usize,
    pub ood_samples: usize,
    /// Standard deviation of the activity component orthogonal to ω.
    pub activity_noise_std: f64,
    pub bumps: usize,
    pub mean_magnitude_std: f64,
    pub std_magnitude_std: f64,
    pub std_floor: f64,
}

impl Default for SimBrainSpec {
    fn default() -> Self {
        Self {
            instances: 100,
            neurons: (1e4, 1.1e4),
            samples: (7500.0, 9000.0),
            noise_shape: 10.0,
            noise_rate: 1000.0,
            validation_samples: 1000,
            test_samples: 1000,
            ood_samples: 1000,
            activity_noise_std: 1.0,
            bumps: 50,
            mean_magnitude_std: 1.0,
            std_magnitude_std: 0.1,
            std_floor: 0.01,
        }
    }
}

/// Multipliers taking the full-scale spec to desk scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScaleSpec {
    pub neurons: f64,
    /// Applies to training, validation, test and OOD sample counts.
    pub samples: f64,
    pub instances: f64,
}

impl Default for ScaleSpec {
    fn default() -> Self {
        Self {
            neurons: 0.05,
            samples: 0.25,
            instances: 0.2,
        }
    }
}

impl ScaleSpec {
    pub const FULL: ScaleSpec = ScaleSpec {
        neurons: 1.0,
        samples: 1.0,
        instances: 1.0,
    };

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("neurons", self.neurons), ("samples", self.samples), ("instances", self.instances)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(DpmsError::Invalid(format!("scale.{name} = {v} must lie in (0, 1]")));
            }
        }
        Ok(())
    }

    pub(crate) fn count(factor: f64, n: usize) -> usize {
        ((n as f64 * factor).round() as usize).max(1)
    }

    pub(crate) fn range(factor: f64, (lo, hi): (f64, f64)) -> (f64, f64) {
        (lo * factor, hi * factor)
    }
}

/// Samples from one instance.
#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    /// n × d_x
    pub x: Array2<f64>,
    /// n × 1
    pub y: Array2<f64>,
    /// Shared-space targets, `ωᵀx_t`.
    pub l: Array1<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimInstance {
    pub index: usize,
    pub name: String,
    /// d_x × 2 neuron positions.
    pub props: Array2<f64>,
    pub omega: Array1<f64>,
    pub nu: f64,
    pub silent: Vec<bool>,
    pub interval: (f64, f64),
    pub train: Split,
    pub validation: Split,
    pub test: Split,
    pub ood: Split,
}

#[derive(Clone, Debug)]
pub struct SimBrain {
    pub spec: SimBrainSpec,
    pub scale: ScaleSpec,
    pub seed: u64,
    pub cpd: GroundTruthCpd,
    pub instances: Vec<SimInstance>,
}

pub fn gen_ground_truth_cpd(spec: &SimBrainSpec, seed: u64) -> GroundTruthCpd {
    let mut rng = item_rng(seed, u64::MAX, 0);
    GroundTruthCpd::random(&mut rng, spec.bumps, 2, spec.mean_magnitude_std, spec.std_magnitude_std, spec.std_floor)
}

/// Unit normal of the silent half-plane for instance `index`; a neuron at
/// `m` is silent when `(m − ½)·d > 0`. Rotates 90° clockwise per instance.
fn silent_direction(index: usize) -> [f64; 2] {
    match index % 4 {
        0 => [-1.0, 0.0],
        1 => [0.0, 1.0],
        2 => [1.0, 0.0],
        _ => [0.0, -1.0],
    }
}

fn interval_for<R: Rng>(index: usize, rng: &mut R) -> (f64, f64) {
    let lead = if index < 4 { -2.0 + index as f64 } else { rng.random_range(-2.0..=1.0) };
    (lead, lead + 1.0)
}

/// Activity hitting `targets` exactly: a part along the active ω plus
/// Gaussian noise on active neurons projected orthogonal to it.
fn make_split<R: Rng>(omega: &Array1<f64>, active: &[bool], targets: Array1<f64>, nu: f64, noise_std: f64, rng: &mut R) -> Split {
    let d = omega.len();
    let n = targets.len();
    let wa: Array1<f64> = Array1::from_shape_fn(d, |i| if active[i] { omega[i] } else { 0.0 });
    let norm2 = wa.dot(&wa);
    let mut x = Array2::zeros((n, d));
    for (t, mut row) in x.axis_iter_mut(Axis(0)).enumerate() {
        let mut noise = Array1::from_shape_fn(d, |i| if active[i] { noise_std * rng.sample::<f64, _>(StandardNormal) } else { 0.0 });
        let along = noise.dot(&wa) / norm2;
        noise.scaled_add(-along, &wa);
        let scale = targets[t] / norm2;
        for i in 0..d {
            row[i] = scale * wa[i] + noise[i];
        }
    }
    let y = Array2::from_shape_fn((n, 1), |(t, _)| shared_function(targets[t]) + nu * rng.sample::<f64, _>(StandardNormal));
    let split = Split { x, y, l: targets };
    check_split(omega, active, &split);
    split
}

/// Constructional equalities, enforced at generation time.
fn check_split(omega: &Array1<f64>, active: &[bool], split: &Split) {
    for (t, row) in split.x.rows().into_iter().enumerate() {
        let proj = row.dot(omega);
        assert!((proj - split.l[t]).abs() <= 1e-10, "ωᵀx = {proj} misses target {}", split.l[t]);
        for (i, &a) in active.iter().enumerate() {
            assert!(a || row[i] == 0.0, "silent neuron {i} has activity {}", row[i]);
        }
    }
}

fn uniform_targets<R: Rng>(n: usize, (lo, hi): (f64, f64), rng: &mut R) -> Array1<f64> {
    Array1::from_shape_fn(n, |_| rng.random_range(lo..hi))
}

fn draw_count<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> usize {
    rng.random_range(lo.round() as usize..=hi.round() as usize)
}

pub fn instance_name(index: usize) -> String {
    format!("brain{index:03}")
}

/// One simulated brain. Draws depend only on `(spec, cpd, index, seed, scale)`.
pub fn gen_instance(spec: &SimBrainSpec, cpd: &GroundTruthCpd, index: usize, seed: u64, scale: &ScaleSpec) -> Result<SimInstance> {
    scale.validate()?;
    let mut rng = item_rng(seed, index as u64, 0);
    let d = draw_count(&mut rng, ScaleSpec::range(scale.neurons, spec.neurons));
    let n = draw_count(&mut rng, ScaleSpec::range(scale.samples, spec.samples));
    let props = Array2::from_shape_simple_fn((d, 2), || rng.random_range(0.0..1.0));
    let omega = Array1::from(cpd.sample(&mut rng, &props));
    let gamma = Gamma::new(spec.noise_shape, 1.0 / spec.noise_rate).map_err(|e| DpmsError::Invalid(e.to_string()))?;
    let nu = rng.sample(gamma);
    let dir = silent_direction(index);
    let silent: Vec<bool> = props
        .rows()
        .into_iter()
        .map(|m| (m[0] - 0.5) * dir[0] + (m[1] - 0.5) * dir[1] > 0.0)
        .collect();
    let active: Vec<bool> = silent.iter().map(|s| !s).collect();
    if !active.iter().zip(omega.iter()).any(|(&a, &w)| a && w != 0.0) {
        return Err(DpmsError::Invalid(format!("instance {index} has no active neuron with nonzero weight")));
    }
    let interval = interval_for(index, &mut rng);
    let split = |count: usize, part: u64| {
        let mut r = item_rng(seed, index as u64, part);
        let targets = uniform_targets(count, interval, &mut r);
        make_split(&omega, &active, targets, nu, spec.activity_noise_std, &mut r)
    };
    let train = split(n, 1);
    let validation = split(ScaleSpec::count(scale.samples, spec.validation_samples), 2);
    let test = split(ScaleSpec::count(scale.samples, spec.test_samples), 3);
    let mut inst = SimInstance {
        index,
        name: instance_name(index),
        props,
        omega,
        nu,
        silent,
        interval,
        train,
        validation,
        test,
        ood: Split {
            x: Array2::zeros((0, d)),
            y: Array2::zeros((0, 1)),
            l: Array1::zeros(0),
        },
    };
    inst.ood = gen_ood_data(spec, &inst, seed, scale);
    Ok(inst)
}

/// All neurons active and targets over the whole domain of the shared function.
pub fn gen_ood_data(spec: &SimBrainSpec, instance: &SimInstance, seed: u64, scale: &ScaleSpec) -> Split {
    let mut rng = item_rng(seed, instance.index as u64, 4);
    let n = ScaleSpec::count(scale.samples, spec.ood_samples);
    let targets = uniform_targets(n, (-2.0, 2.0), &mut rng);
    let active = vec![true; instance.omega.len()];
    make_split(&instance.omega, &active, targets, instance.nu, spec.activity_noise_std, &mut rng)
}

pub fn gen_sim_brain(spec: &SimBrainSpec, scale: &ScaleSpec, seed: u64) -> Result<SimBrain> {
    scale.validate()?;
    let cpd = gen_ground_truth_cpd(spec, seed);
    let count = ScaleSpec::count(scale.instances, spec.instances);
    let instances = (0..count)
        .into_par_iter()
        .map(|i| gen_instance(spec, &cpd, i, seed, scale))
        .collect::<Result<Vec<_>>>()?;
    Ok(SimBrain {
        spec: spec.clone(),
        scale: *scale,
        seed,
        cpd,
        instances,
    })
}

fn column(v: &Array1<f64>) -> Array2<f64> {
    v.clone().insert_axis(Axis(1))
}

impl Split {
    fn push_to(&self, prefix: &str, inst: &mut DatasetInstance) {
        inst.insert(format!("{prefix}.x"), self.x.clone());
        inst.insert(format!("{prefix}.y"), self.y.clone());
        inst.insert(format!("{prefix}.l"), column(&self.l));
    }

    fn take_from(prefix: &str, inst: &DatasetInstance) -> Result<Split> {
        Ok(Split {
            x: inst.tensor(&format!("{prefix}.x"))?.clone(),
            y: inst.tensor(&format!("{prefix}.y"))?.clone(),
            l: inst.tensor(&format!("{prefix}.l"))?.column(0).to_owned(),
        })
    }
}

impl SimBrain {
    pub const EXPERIMENT: &'static str = "sim-brain";
    pub const SPLITS: [&'static str; 4] = ["train", "validation", "test", "ood"];

    pub fn to_dataset(&self) -> Result<Dataset> {
        let instances = self
            .instances
            .iter()
            .map(|s| {
                let mut inst = DatasetInstance::new(
                    &s.name,
                    json!({ "index": s.index, "nu": s.nu, "interval": [s.interval.0, s.interval.1] }),
                );
                inst.insert("props", s.props.clone());
                inst.insert("omega", column(&s.omega));
                inst.insert("silent", Array2::from_shape_fn((s.silent.len(), 1), |(i, _)| s.silent[i] as u8 as f64));
                for (prefix, split) in Self::SPLITS.iter().zip([&s.train, &s.validation, &s.test, &s.ood]) {
                    split.push_to(prefix, &mut inst);
                }
                inst
            })
            .collect();
        Ok(Dataset {
            experiment: Self::EXPERIMENT.to_string(),
            seed: self.seed,
            meta: json!({ "spec": self.spec, "scale": self.scale, "cpd": self.cpd }),
            instances,
        })
    }

    pub fn from_dataset(ds: &Dataset) -> Result<Self> {
        ds.expect_experiment(Self::EXPERIMENT)?;
        let spec = serde_json::from_value(ds.meta["spec"].clone())?;
        let scale = serde_json::from_value(ds.meta["scale"].clone())?;
        let cpd = serde_json::from_value(ds.meta["cpd"].clone())?;
        let instances = ds
            .instances
            .iter()
            .map(|inst| {
                let interval: (f64, f64) = serde_json::from_value(inst.meta["interval"].clone())?;
                Ok(SimInstance {
                    index: serde_json::from_value(inst.meta["index"].clone())?,
                    name: inst.name.clone(),
                    props: inst.tensor("props")?.clone(),
                    omega: inst.tensor("omega")?.column(0).to_owned(),
                    nu: serde_json::from_value(inst.meta["nu"].clone())?,
                    silent: inst.tensor("silent")?.iter().map(|&v| v != 0.0).collect(),
                    interval,
                    train: Split::take_from("train", inst)?,
                    validation: Split::take_from("validation", inst)?,
                    test: Split::take_from("test", inst)?,
                    ood: Split::take_from("ood", inst)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            spec,
            scale,
            seed: ds.seed,
            cpd,
            instances,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> (SimBrainSpec, ScaleSpec) {
        let spec = SimBrainSpec::default();
        let scale = ScaleSpec {
            neurons: 0.005,
            samples: 0.01,
            instances: 0.06,
        };
        (spec, scale)
    }

    #[test]
    fn desk_scale_counts() {
        let spec = SimBrainSpec::default();
        let scale = ScaleSpec::default();
        assert_eq!(ScaleSpec::count(scale.instances, spec.instances), 20);
        let cpd = gen_ground_truth_cpd(&spec, 3);
        let s = gen_instance(&spec, &cpd, 0, 3, &scale).unwrap();
        assert!((500..=550).contains(&s.omega.len()));
        assert!((1875..=2250).contains(&s.train.x.nrows()));
        assert_eq!(s.interval, (-2.0, -1.0));
    }

    #[test]
    fn construction_invariants() {
        let (spec, scale) = small();
        let brain = gen_sim_brain(&spec, &scale, 11).unwrap();
        assert_eq!(brain.instances.len(), 6);
        for (i, s) in brain.instances.iter().enumerate() {
            if i < 4 {
                assert_eq!(s.interval, (-2.0 + i as f64, -1.0 + i as f64));
            } else {
                assert!(s.interval.0 >= -2.0 && s.interval.0 <= 1.0);
            }
            assert!(s.train.l.iter().all(|&l| l >= s.interval.0 && l < s.interval.1));
            for split in [&s.train, &s.validation, &s.test, &s.ood] {
                let proj = split.x.dot(&s.omega);
                for (p, l) in proj.iter().zip(split.l.iter()) {
                    assert!((p - l).abs() <= 1e-10);
                }
            }
            for (row, &silent) in s.train.x.columns().into_iter().zip(&s.silent) {
                if silent {
                    assert!(row.iter().all(|&v| v == 0.0));
                }
            }
            assert!(s.silent.iter().any(|&v| v) && s.silent.iter().any(|&v| !v));
        }
        // the silent half rotates: instance 0 silences the left half
        let s0 = &brain.instances[0];
        for (m, &silent) in s0.props.rows().into_iter().zip(&s0.silent) {
            assert_eq!(silent, m[0] < 0.5);
        }
    }

    #[test]
    fn ood_covers_the_domain() {
        let (spec, scale) = small();
        let cpd = gen_ground_truth_cpd(&spec, 5);
        let s = gen_instance(&spec, &cpd, 1, 5, &ScaleSpec { samples: 0.1, ..scale }).unwrap();
        let lo = s.ood.l.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = s.ood.l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!((hi - lo) / 4.0 >= 0.95, "coverage {lo}..{hi}");
        let active_cols = s.ood.x.columns().into_iter().filter(|c| c.iter().any(|&v| v != 0.0)).count();
        assert_eq!(active_cols, s.omega.len());
    }

    #[test]
    fn generation_is_pure() {
        let (spec, scale) = small();
        let a = gen_sim_brain(&spec, &scale, 9).unwrap();
        let b = gen_sim_brain(&spec, &scale, 9).unwrap();
        assert_eq!(a.instances, b.instances);
        let c = gen_sim_brain(&spec, &scale, 10).unwrap();
        assert_ne!(a.instances[0].omega, c.instances[0].omega);
    }

    #[test]
    fn invalid_scale_is_rejected() {
        let spec = SimBrainSpec::default();
        let scale = ScaleSpec { neurons: 1.5, ..ScaleSpec::default() };
        assert!(gen_sim_brain(&spec, &scale, 1).is_err());
    }
}
