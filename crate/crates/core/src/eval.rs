//! Metrics and post-hoc analyses of fitted models.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::{Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{DpmsError, Result};
use crate::special::LN_2PI;

fn same_shape(a: &Array2<f64>, b: &Array2<f64>, context: &str) -> Result<()> {
    if a.dim() != b.dim() || a.is_empty() {
        return Err(DpmsError::shape(context, &[a.nrows(), a.ncols()], &[b.nrows(), b.ncols()]));
    }
    Ok(())
}

/// `1 − SS_res / SS_tot`, averaged over columns.
pub fn r_squared(y_true: &Array2<f64>, y_pred: &Array2<f64>) -> Result<f64> {
    same_shape(y_true, y_pred, "r_squared")?;
    let mut total = 0.0;
    for (t, p) in y_true.columns().into_iter().zip(y_pred.columns()) {
        let mean = t.mean().unwrap_or(0.0);
        let ss_tot: f64 = t.iter().map(|v| (v - mean).powi(2)).sum();
        let ss_res: f64 = t.iter().zip(p).map(|(a, b)| (a - b).powi(2)).sum();
        total += 1.0 - ss_res / ss_tot;
    }
    Ok(total / y_true.ncols() as f64)
}

/// R² as reported: values below −1 are clipped to −1.
pub fn clip_r2(r2: f64) -> f64 {
    r2.max(-1.0)
}

/// Pearson correlation, arithmetic mean over columns.
pub fn pearson(y_true: &Array2<f64>, y_pred: &Array2<f64>) -> Result<f64> {
    same_shape(y_true, y_pred, "pearson")?;
    let mut total = 0.0;
    for (t, p) in y_true.columns().into_iter().zip(y_pred.columns()) {
        total += pearson_slice(&t.to_vec(), &p.to_vec());
    }
    Ok(total / y_true.ncols() as f64)
}

pub fn pearson_slice(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)
}

/// Least-squares `k` minimizing `Σ (k·est − truth)²` over unmasked points.
pub fn identifiability_scale(est: &[f64], truth: &[f64], mask: Option<&[bool]>) -> Result<f64> {
    if est.len() != truth.len() || mask.is_some_and(|m| m.len() != est.len()) {
        return Err(DpmsError::shape("identifiability_scale", &[est.len()], &[truth.len()]));
    }
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..est.len() {
        if mask.is_none_or(|m| m[i]) {
            num += est[i] * truth[i];
            den += est[i] * est[i];
        }
    }
    if den == 0.0 {
        return Err(DpmsError::Invalid("estimated field is zero on the compared points".into()));
    }
    Ok(num / den)
}

fn to_dmatrix(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

fn from_dmatrix(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

/// Eigen-decomposition of `ΛᵀΛ` with eigenvalues in decreasing order.
fn right_singular(l: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let gram = l.transpose() * l;
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let vectors = DMatrix::from_fn(l.ncols(), order.len(), |r, c| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Orthonormalized {
    pub loadings: Array2<f64>,
    pub transform: Array2<f64>,
    /// Squared column norms of the result (the squared singular values).
    pub explained: Vec<f64>,
}

/// `Λ·T` with orthogonal columns of decreasing norm, where `T` is orthogonal
/// and each result column has a positive largest-magnitude entry.
pub fn orthonormalize_fa(lambda: &Array2<f64>) -> Orthonormalized {
    let l = to_dmatrix(lambda);
    let (values, mut t) = right_singular(&l);
    let mut out = &l * &t;
    for j in 0..out.ncols() {
        let col = out.column(j);
        let big = col.iter().copied().fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
        if big < 0.0 {
            out.column_mut(j).neg_mut();
            t.column_mut(j).neg_mut();
        }
    }
    Orthonormalized {
        loadings: from_dmatrix(&out),
        transform: from_dmatrix(&t),
        explained: values,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SharedDirections {
    /// d_z × d_z, column j is `u_j`.
    pub directions: Array2<f64>,
    pub fractions: Vec<f64>,
}

/// Right singular vectors of the row-stacked loadings.
pub fn shared_variance_directions(loadings: &[Array2<f64>]) -> Result<SharedDirections> {
    let dz = loadings.first().map(|l| l.ncols()).ok_or_else(|| DpmsError::Invalid("no loadings".into()))?;
    if loadings.iter().any(|l| l.ncols() != dz) {
        return Err(DpmsError::Invalid("loadings must share their latent dimension".into()));
    }
    let views: Vec<_> = loadings.iter().map(|l| l.view()).collect();
    let stacked = ndarray::concatenate(Axis(0), &views).map_err(|e| DpmsError::Invalid(e.to_string()))?;
    let (values, vectors) = right_singular(&to_dmatrix(&stacked));
    let total: f64 = values.iter().sum();
    Ok(SharedDirections {
        directions: from_dmatrix(&vectors),
        fractions: values.iter().map(|v| v / total).collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    /// Cosines of the principal angles, decreasing.
    pub cosines: Vec<f64>,
    pub mean_cosine: f64,
}

fn orthonormal_basis(a: &Array2<f64>) -> DMatrix<f64> {
    let svd = to_dmatrix(a).svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    let rank = svd.singular_values.iter().filter(|&&s| s > 1e-12 * svd.singular_values.max()).count();
    u.columns(0, rank).into_owned()
}

/// Principal angles between the column spaces of two loading matrices with
/// the same number of rows.
pub fn loading_alignment(a: &Array2<f64>, b: &Array2<f64>) -> Result<Alignment> {
    if a.nrows() != b.nrows() {
        return Err(DpmsError::shape("loading_alignment rows", &[a.nrows()], &[b.nrows()]));
    }
    let qa = orthonormal_basis(a);
    let qb = orthonormal_basis(b);
    let m = qa.transpose() * &qb;
    let mut cosines: Vec<f64> = m.singular_values().iter().map(|s| s.min(1.0)).collect();
    cosines.sort_by(|x, y| y.total_cmp(x));
    let k = qa.ncols().min(qb.ncols());
    cosines.truncate(k);
    let mean_cosine = if k == 0 { 0.0 } else { cosines.iter().sum::<f64>() / k as f64 };
    Ok(Alignment { cosines, mean_cosine })
}

/// Factor-analysis parameters: loadings d_x×d_z, offsets and noise variances d_x×1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaParams {
    pub loadings: Array2<f64>,
    pub offsets: Array2<f64>,
    pub noise_var: Array2<f64>,
}

/// `Σ_t log N(x_t | η, ΛΛᵀ + Ψ)`.
pub fn fa_marginal_log_lik(x: &Array2<f64>, p: &FaParams) -> Result<f64> {
    let (n, dx) = x.dim();
    if p.loadings.nrows() != dx {
        return Err(DpmsError::shape("factor analysis data", &[dx], &[p.loadings.nrows()]));
    }
    let l = to_dmatrix(&p.loadings);
    let mut cov = &l * l.transpose();
    for i in 0..dx {
        cov[(i, i)] += p.noise_var[[i, 0]];
    }
    let chol = cov
        .cholesky()
        .ok_or_else(|| DpmsError::Invalid("factor analysis covariance is not positive definite".into()))?;
    let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let mut quad = 0.0;
    for t in 0..n {
        let r = DVector::from_fn(dx, |i, _| x[[t, i]] - p.offsets[[i, 0]]);
        let w = chol.solve(&r);
        quad += r.dot(&w);
    }
    Ok(-0.5 * (quad + n as f64 * (logdet + dx as f64 * LN_2PI)))
}

/// Maximum-likelihood factor analysis by EM.
pub fn fa_em<R: Rng>(x: &Array2<f64>, latent_dim: usize, iterations: usize, rng: &mut R) -> Result<FaParams> {
    let (n, dx) = x.dim();
    if n < 2 || latent_dim == 0 || latent_dim > dx {
        return Err(DpmsError::Invalid(format!("cannot fit {latent_dim} factors to {n}×{dx} data")));
    }
    let mean = x.mean_axis(Axis(0)).expect("non-empty");
    let xc = to_dmatrix(&(x - &mean.view().insert_axis(Axis(0))));
    let s = xc.transpose() * &xc / n as f64;
    let floor = 1e-6;
    let mut psi: Vec<f64> = (0..dx).map(|i| s[(i, i)].max(floor)).collect();
    let mut l = DMatrix::from_fn(dx, latent_dim, |i, _| 0.1 * psi[i].sqrt() * rng.sample::<f64, _>(StandardNormal));
    for _ in 0..iterations {
        // E-step: G = (I + ΛᵀΨ⁻¹Λ)⁻¹, β = GΛᵀΨ⁻¹
        let lt_psi = DMatrix::from_fn(latent_dim, dx, |j, i| l[(i, j)] / psi[i]);
        let g = (DMatrix::identity(latent_dim, latent_dim) + &lt_psi * &l)
            .try_inverse()
            .ok_or_else(|| DpmsError::Invalid("singular factor-analysis E-step".into()))?;
        let beta = &g * &lt_psi;
        let sb = &s * beta.transpose();
        let ezz = &g + &beta * &sb;
        let ezz_inv = ezz
            .try_inverse()
            .ok_or_else(|| DpmsError::Invalid("singular factor-analysis M-step".into()))?;
        l = &sb * ezz_inv;
        let lsb = &l * sb.transpose();
        for i in 0..dx {
            psi[i] = (s[(i, i)] - lsb[(i, i)]).max(floor);
        }
    }
    Ok(FaParams {
        loadings: from_dmatrix(&l),
        offsets: mean.insert_axis(Axis(1)),
        noise_var: Array2::from_shape_fn((dx, 1), |(i, _)| psi[i]),
    })
}

/// Metrics for one instance on one split; absent entries do not apply.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceMetrics {
    pub instance: String,
    pub split: String,
    pub elbo: Option<f64>,
    pub normalized_elbo: Option<f64>,
    pub r2: Option<f64>,
    pub corr: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub elbo: Option<f64>,
    pub normalized_elbo: Option<f64>,
    pub r2: Option<f64>,
    pub corr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub experiment: String,
    pub instances: Vec<InstanceMetrics>,
    pub summary: BTreeMap<String, SplitSummary>,
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl MetricReport {
    /// Builds the report; R² values are stored clipped at −1.
    pub fn new(experiment: impl Into<String>, mut instances: Vec<InstanceMetrics>) -> Self {
        for m in &mut instances {
            m.r2 = m.r2.map(clip_r2);
        }
        let mut summary = BTreeMap::new();
        let splits: Vec<String> = instances.iter().map(|m| m.split.clone()).collect();
        for split in splits {
            if summary.contains_key(&split) {
                continue;
            }
            let rows: Vec<&InstanceMetrics> = instances.iter().filter(|m| m.split == split).collect();
            summary.insert(
                split,
                SplitSummary {
                    elbo: mean_of(rows.iter().map(|m| m.elbo)),
                    normalized_elbo: mean_of(rows.iter().map(|m| m.normalized_elbo)),
                    r2: mean_of(rows.iter().map(|m| m.r2)),
                    corr: mean_of(rows.iter().map(|m| m.corr)),
                },
            );
        }
        Self {
            experiment: experiment.into(),
            instances,
            summary,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// One row per (instance, split, metric) that applies.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("instance,split,metric,value\n");
        for m in &self.instances {
            for (name, v) in [
                ("elbo", m.elbo),
                ("normalized_elbo", m.normalized_elbo),
                ("r2", m.r2),
                ("corr", m.corr),
            ] {
                if let Some(v) = v {
                    let _ = writeln!(out, "{},{},{},{}", m.instance, m.split, name, v);
                }
            }
        }
        out
    }

    /// True when every reported number is finite.
    pub fn is_finite(&self) -> bool {
        self.instances
            .iter()
            .flat_map(|m| [m.elbo, m.normalized_elbo, m.r2, m.corr])
            .flatten()
            .all(f64::is_finite)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn r_squared_basics() {
        let y = array![[1.0], [2.0], [4.0], [5.0]];
        assert_eq!(r_squared(&y, &y).unwrap(), 1.0);
        assert!(r_squared(&y, &Array2::from_elem((4, 1), 3.0)).unwrap().abs() < 1e-15);
        // residuals 0.5,-0.5,0,1 → SS_res 1.5; SS_tot 10
        let p = array![[0.5], [2.5], [4.0], [4.0]];
        assert!((r_squared(&y, &p).unwrap() - 0.85).abs() < 1e-12);
    }

    #[test]
    fn correlation_is_affine_invariant() {
        let y = array![[1.0], [3.0], [2.0], [7.0]];
        let p = array![[0.5], [2.0], [2.5], [6.0]];
        let c = pearson(&y, &p).unwrap();
        let c2 = pearson(&y, &p.mapv(|v| 3.0 * v - 2.0)).unwrap();
        assert!((c - c2).abs() < 1e-15);
    }

    #[test]
    fn scale_matches_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let est: Vec<f64> = (0..40).map(|_| rng.sample(StandardNormal)).collect();
        let truth: Vec<f64> = est.iter().map(|v| -2.3 * v + 0.3 * rng.sample::<f64, _>(StandardNormal)).collect();
        let k = identifiability_scale(&est, &truth, None).unwrap();
        let (mut best, mut arg) = (f64::INFINITY, 0.0);
        for i in 0..=200_000 {
            let c = -10.0 + i as f64 * 1e-4;
            let e: f64 = est.iter().zip(&truth).map(|(a, b)| (c * a - b).powi(2)).sum();
            if e < best {
                best = e;
                arg = c;
            }
        }
        assert!((k - arg).abs() < 1e-3);
        assert_eq!(identifiability_scale(&[1.0, 2.0], &[2.0, 4.0], None).unwrap(), 2.0);
    }

    #[test]
    fn orthonormalization_preserves_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let l = Array2::from_shape_simple_fn((12, 3), || rng.sample(StandardNormal));
        let o = orthonormalize_fa(&l);
        let g = o.loadings.t().dot(&o.loadings);
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert!(g[[i, j]].abs() < 1e-10);
                }
            }
            assert!((g[[i, i]] - o.explained[i]).abs() < 1e-9 * o.explained[0]);
        }
        assert!(o.explained.windows(2).all(|w| w[0] >= w[1]));
        let d = o.loadings.dot(&o.loadings.t()) - l.dot(&l.t());
        assert!(d.iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn alignment_of_rotated_copy() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let l = Array2::from_shape_simple_fn((10, 3), || rng.sample(StandardNormal));
        let (c, s) = (0.3f64.cos(), 0.3f64.sin());
        let r = array![[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]];
        let a = loading_alignment(&l, &l.dot(&r)).unwrap();
        assert!(a.cosines.iter().all(|v| (v - 1.0).abs() < 1e-10));
        let e1 = array![[1.0], [0.0], [0.0]];
        let e2 = array![[0.0], [1.0], [0.0]];
        assert!(loading_alignment(&e1, &e2).unwrap().mean_cosine.abs() < 1e-15);
    }

    #[test]
    fn em_recovers_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let l = Array2::from_shape_simple_fn((6, 2), || rng.sample::<f64, _>(StandardNormal));
        let z = Array2::from_shape_simple_fn((4000, 2), || rng.sample::<f64, _>(StandardNormal));
        let e = Array2::from_shape_simple_fn((4000, 6), || 0.3 * rng.sample::<f64, _>(StandardNormal));
        let x = z.dot(&l.t()) + e + 1.5;
        let p = fa_em(&x, 2, 300, &mut rng).unwrap();
        let cov = p.loadings.dot(&p.loadings.t()) - l.dot(&l.t());
        assert!(cov.iter().all(|v| v.abs() < 0.2), "{cov:?}");
        let truth = FaParams {
            loadings: l,
            offsets: Array2::from_elem((6, 1), 1.5),
            noise_var: Array2::from_elem((6, 1), 0.09),
        };
        assert!(fa_marginal_log_lik(&x, &p).unwrap() >= fa_marginal_log_lik(&x, &truth).unwrap() - 1.0);
    }

    #[test]
    fn report_rows_and_clipping() {
        let rows = vec![
            InstanceMetrics {
                instance: "a".into(),
                split: "test".into(),
                elbo: Some(1.0),
                normalized_elbo: Some(0.5),
                r2: Some(-3.0),
                corr: Some(0.1),
            },
            InstanceMetrics {
                instance: "a".into(),
                split: "ood".into(),
                elbo: Some(2.0),
                normalized_elbo: Some(1.0),
                r2: Some(0.4),
                corr: Some(0.9),
            },
        ];
        let r = MetricReport::new("x", rows);
        assert_eq!(r.instances[0].r2, Some(-1.0));
        assert_eq!(r.to_csv().lines().count(), 1 + 2 * 4);
    }
}
