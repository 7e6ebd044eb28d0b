//! One observation per instance from `y = θᵀx + r`, `θ ~ N(μ, I)`, `r ~ N(0, 1)`.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde_json::json;

use super::dataset::{Dataset, DatasetInstance};
use super::item_rng;
use crate::error::Result;

pub const LINEAR_TRUE_MEAN: [f64; 5] = [0.0, 1.0, 2.0, 3.0, 4.0];
pub const LINEAR_NOISE_STD: f64 = 1.0;

#[derive(Clone, Debug, PartialEq)]
pub struct LinearInstance {
    pub name: String,
    /// 1 × 5
    pub x: Array2<f64>,
    /// 1 × 1
    pub y: Array2<f64>,
    pub theta: Array1<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearOneSample {
    pub seed: u64,
    pub instances: Vec<LinearInstance>,
}

pub fn gen_linear_one_sample(instances: usize, seed: u64) -> LinearOneSample {
    let dim = LINEAR_TRUE_MEAN.len();
    let instances = (0..instances)
        .map(|s| {
            let mut rng = item_rng(seed, s as u64, 0);
            let mut normal = || rng.sample::<f64, _>(StandardNormal);
            let theta = Array1::from_shape_fn(dim, |j| LINEAR_TRUE_MEAN[j] + normal());
            let x = Array2::from_shape_fn((1, dim), |_| normal());
            let y = x.dot(&theta)[0] + LINEAR_NOISE_STD * normal();
            LinearInstance {
                name: format!("system{s:03}"),
                x,
                y: Array2::from_elem((1, 1), y),
                theta,
            }
        })
        .collect();
    LinearOneSample { seed, instances }
}

impl LinearOneSample {
    pub const EXPERIMENT: &'static str = "linear-one-sample";

    /// Every instance shares the same single property.
    pub fn props() -> Array2<f64> {
        Array2::from_elem((1, 1), 0.5)
    }

    pub fn to_dataset(&self) -> Dataset {
        let instances = self
            .instances
            .iter()
            .map(|s| {
                let mut inst = DatasetInstance::new(&s.name, json!({}));
                inst.insert("props", Self::props());
                inst.insert("train.x", s.x.clone());
                inst.insert("train.y", s.y.clone());
                inst.insert("theta", s.theta.clone().insert_axis(ndarray::Axis(0)));
                inst
            })
            .collect();
        Dataset {
            experiment: Self::EXPERIMENT.to_string(),
            seed: self.seed,
            meta: json!({ "true_mean": LINEAR_TRUE_MEAN, "noise_std": LINEAR_NOISE_STD }),
            instances,
        }
    }

    pub fn from_dataset(ds: &Dataset) -> Result<Self> {
        ds.expect_experiment(Self::EXPERIMENT)?;
        let instances = ds
            .instances
            .iter()
            .map(|inst| {
                Ok(LinearInstance {
                    name: inst.name.clone(),
                    x: inst.tensor("train.x")?.clone(),
                    y: inst.tensor("train.y")?.clone(),
                    theta: inst.tensor("theta")?.row(0).to_owned(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { seed: ds.seed, instances })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_instance_one_sample() {
        let g = gen_linear_one_sample(1, 3);
        assert_eq!(g.instances.len(), 1);
        assert_eq!(g.instances[0].x.dim(), (1, 5));
        assert_eq!(g.instances[0].y.dim(), (1, 1));
    }

    #[test]
    fn theta_mean_within_three_standard_errors() {
        let g = gen_linear_one_sample(10_000, 17);
        let n = g.instances.len() as f64;
        for (j, mu) in LINEAR_TRUE_MEAN.iter().enumerate() {
            let mean = g.instances.iter().map(|s| s.theta[j]).sum::<f64>() / n;
            // unit variance, so the standard error is 1/√n
            assert!((mean - mu).abs() < 3.0 / n.sqrt(), "θ[{j}] mean {mean}");
        }
    }

    #[test]
    fn prefix_stable_across_instance_counts() {
        let a = gen_linear_one_sample(5, 2);
        let b = gen_linear_one_sample(50, 2);
        assert_eq!(a.instances[..], b.instances[..5]);
    }
}
