use ndarray::Array2;
use rand::Rng;
use rand_distr::{Normal, StandardNormal};
use serde::{Deserialize, Serialize};

/// Length scale of every bump: `a·exp(−‖m − c‖² / BUMP_WIDTH²)`.
pub const BUMP_WIDTH: f64 = 0.2;

/// Sum of Gaussian bumps over the unit hypercube.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BumpFunction {
    /// k × r
    pub centers: Array2<f64>,
    pub magnitudes: Vec<f64>,
    /// Sum `|bump|` instead of `bump`.
    pub absolute: bool,
    pub offset: f64,
}

impl BumpFunction {
    /// `count` bumps with uniform centers and `N(0, magnitude_std²)` magnitudes.
    pub fn random<R: Rng>(rng: &mut R, count: usize, dims: usize, magnitude_std: f64, absolute: bool, offset: f64) -> Self {
        let centers = Array2::from_shape_simple_fn((count, dims), || rng.random_range(0.0..1.0));
        let normal = Normal::new(0.0, magnitude_std).expect("finite std");
        let magnitudes = (0..count).map(|_| rng.sample(normal)).collect();
        Self {
            centers,
            magnitudes,
            absolute,
            offset,
        }
    }

    pub fn dims(&self) -> usize {
        self.centers.ncols()
    }

    pub fn value(&self, m: &[f64]) -> f64 {
        let w2 = BUMP_WIDTH * BUMP_WIDTH;
        let mut total = self.offset;
        for (c, &a) in self.centers.rows().into_iter().zip(&self.magnitudes) {
            let d2: f64 = c.iter().zip(m).map(|(ci, mi)| (ci - mi).powi(2)).sum();
            let b = a * (-d2 / w2).exp();
            total += if self.absolute { b.abs() } else { b };
        }
        total
    }

    /// Values at the rows of `points`.
    pub fn evaluate(&self, points: &Array2<f64>) -> Vec<f64> {
        points.rows().into_iter().map(|r| self.value(r.as_slice().expect("standard layout"))).collect()
    }
}

/// Mean and standard deviation fields of a Gaussian CPD over one column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthCpd {
    pub mean: BumpFunction,
    pub std: BumpFunction,
}

impl GroundTruthCpd {
    /// `μ = Σ g_i`, `σ = Σ |h_i| + floor` with magnitudes `N(0, mean_std²)`
    /// and `N(0, std_std²)`.
    pub fn random<R: Rng>(rng: &mut R, bumps: usize, dims: usize, mean_std: f64, std_std: f64, floor: f64) -> Self {
        Self {
            mean: BumpFunction::random(rng, bumps, dims, mean_std, false, 0.0),
            std: BumpFunction::random(rng, bumps, dims, std_std, true, floor),
        }
    }

    /// One draw per row of `props`.
    pub fn sample<R: Rng>(&self, rng: &mut R, props: &Array2<f64>) -> Vec<f64> {
        let mu = self.mean.evaluate(props);
        let sd = self.std.evaluate(props);
        mu.iter()
            .zip(&sd)
            .map(|(m, s)| m + s * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bump_peaks_at_center() {
        let f = BumpFunction {
            centers: ndarray::array![[0.3, 0.6]],
            magnitudes: vec![-1.7],
            absolute: false,
            offset: 0.0,
        };
        assert_eq!(f.value(&[0.3, 0.6]), -1.7);
        let g = BumpFunction { absolute: true, ..f.clone() };
        assert_eq!(g.value(&[0.3, 0.6]), 1.7);
    }

    #[test]
    fn std_field_respects_floor() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cpd = GroundTruthCpd::random(&mut rng, 50, 2, 1.0, 0.1, 0.01);
        let grid = Array2::from_shape_fn((400, 2), |(i, d)| if d == 0 { (i / 20) as f64 / 19.0 } else { (i % 20) as f64 / 19.0 });
        assert!(cpd.std.evaluate(&grid).iter().all(|&s| s >= 0.01));
        let zero = GroundTruthCpd::random(&mut rng, 50, 2, 0.0, 0.0, 0.01);
        assert!(zero.mean.evaluate(&grid).iter().all(|&m| m == 0.0));
        assert!(zero.std.evaluate(&grid).iter().all(|&s| s == 0.01));
    }
}
