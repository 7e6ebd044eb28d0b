//! Reparameterizable Gaussian and Gamma families with analytic KL terms.
//!
//! Parameter-holding types ([`MeanFieldGaussian`], [`BoundedGamma`],
//! [`FullCovGaussian`]) own blocks in a [`ParamStore`]; `vars` records their
//! constrained parameters on a [`Tape`], where the free functions in this
//! module operate.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::diffmath::{bounded_value, ParamId, ParamStore, Tape, Var};
use crate::error::{DpmsError, Result};
use crate::special::{digamma, ln_gamma, LN_2PI};

/// Scaled and shifted tanh mapping the real line into `[lo, hi]`.
///
/// The shift puts raw value 0 at the geometric midpoint `√(lo·hi)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundedTransform {
    pub lo: f64,
    pub hi: f64,
}

pub const SIGMA_BOUNDS: BoundedTransform = BoundedTransform { lo: 1e-6, hi: 10.0 };
pub const SHAPE_BOUNDS: BoundedTransform = BoundedTransform { lo: 1.0, hi: 1e3 };
pub const RATE_BOUNDS: BoundedTransform = BoundedTransform { lo: 1e-1, hi: 1e4 };

impl BoundedTransform {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && hi > lo) {
            return Err(DpmsError::Invalid(format!("bounded transform needs 0 < lo < hi, got [{lo}, {hi}]")));
        }
        Ok(Self { lo, hi })
    }

    pub fn offset(&self) -> f64 {
        let mid = (self.lo * self.hi).sqrt();
        let s = (mid - self.lo) / (self.hi - self.lo);
        0.5 * (s / (1.0 - s)).ln()
    }

    pub fn forward(&self, raw: f64) -> f64 {
        bounded_value(raw, self.lo, self.hi, self.offset())
    }

    /// Raw value mapping to `y` (up to rounding). `y` must lie strictly inside the bounds.
    pub fn inverse(&self, y: f64) -> Result<f64> {
        if !(y > self.lo && y < self.hi) {
            return Err(DpmsError::Invalid(format!(
                "{y} is not strictly inside [{}, {}]",
                self.lo, self.hi
            )));
        }
        let s = (y - self.lo) / (self.hi - self.lo);
        Ok(0.5 * (s / (1.0 - s)).ln() - self.offset())
    }

    /// Like [`inverse`](Self::inverse), then searches neighbouring floats for
    /// a raw value that `forward` maps to `y` bit-exactly. Returns the closest
    /// raw value found when `y` is not reachable.
    pub fn inverse_exact(&self, y: f64) -> Result<f64> {
        Ok(self.try_exact(y)?.unwrap_or_else(|(raw, _)| raw))
    }

    /// `Ok(raw)` when `forward(raw) == y` for some raw near the analytic
    /// inverse; otherwise the closest candidate and its error.
    pub fn try_exact(&self, y: f64) -> Result<std::result::Result<f64, (f64, f64)>> {
        let start = self.inverse(y)?;
        let mut best = (start, (self.forward(start) - y).abs());
        let (mut up, mut down) = (start, start);
        for _ in 0..256 {
            for raw in [up, down] {
                let f = self.forward(raw);
                if f == y {
                    return Ok(Ok(raw));
                }
                if (f - y).abs() < best.1 {
                    best = (raw, (f - y).abs());
                }
            }
            up = up.next_up();
            down = down.next_down();
        }
        Ok(Err(best))
    }

    pub fn apply(&self, tape: &mut Tape, raw: Var) -> Var {
        tape.bounded(raw, self.lo, self.hi, self.offset())
    }
}

/// Elementwise Gaussian recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct GaussianVars {
    pub mean: Var,
    pub std: Var,
}

/// Elementwise Gamma (shape/rate) recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct GammaVars {
    pub shape: Var,
    pub rate: Var,
}

/// Gaussian rows with shared covariance `H·Hᵀ`: `mean` is n×d, `factor` d×d.
#[derive(Clone, Copy, Debug)]
pub struct FullCovVars {
    pub mean: Var,
    pub factor: Var,
}

fn check_noise(tape: &Tape, like: Var, noise: &Array2<f64>, context: &str) -> Result<()> {
    let (r, c) = tape.shape(like);
    if noise.dim() != (r, c) {
        return Err(DpmsError::shape(context, &[r, c], &[noise.nrows(), noise.ncols()]));
    }
    Ok(())
}

/// `mean + std · noise`.
pub fn rsample_gaussian(tape: &mut Tape, q: &GaussianVars, noise: &Array2<f64>) -> Result<Var> {
    check_noise(tape, q.mean, noise, "gaussian rsample noise")?;
    let eps = tape.constant(noise.clone());
    let scaled = tape.mul(q.std, eps);
    Ok(tape.add(q.mean, scaled))
}

/// Reparameterized Gamma draw; `noise` holds standard normal values.
pub fn rsample_gamma(tape: &mut Tape, q: &GammaVars, noise: &Array2<f64>) -> Result<Var> {
    check_noise(tape, q.shape, noise, "gamma rsample noise")?;
    Ok(tape.gamma_rsample(q.shape, q.rate, noise))
}

/// Rows `mean_i + H·ε_i`; `noise` is n×d.
pub fn rsample_full_cov(tape: &mut Tape, q: &FullCovVars, noise: &Array2<f64>) -> Result<Var> {
    check_noise(tape, q.mean, noise, "full-covariance rsample noise")?;
    let eps = tape.constant(noise.clone());
    let scaled = tape.matmul_nt(eps, q.factor);
    Ok(tape.add(q.mean, scaled))
}

/// Elementwise Gaussian log density.
pub fn gaussian_log_prob(tape: &mut Tape, p: &GaussianVars, x: Var) -> Result<Var> {
    if tape.shape(x) != tape.shape(p.mean) {
        let (r, c) = tape.shape(p.mean);
        let (xr, xc) = tape.shape(x);
        return Err(DpmsError::shape("gaussian log_prob", &[r, c], &[xr, xc]));
    }
    Ok(tape.normal_log_prob(x, p.mean, p.std))
}

/// Elementwise Gamma log density; every entry of `x` must be positive.
pub fn gamma_log_prob(tape: &mut Tape, p: &GammaVars, x: Var) -> Result<Var> {
    if tape.shape(x) != tape.shape(p.shape) {
        let (r, c) = tape.shape(p.shape);
        let (xr, xc) = tape.shape(x);
        return Err(DpmsError::shape("gamma log_prob", &[r, c], &[xr, xc]));
    }
    if let Some(&bad) = tape.value(x).iter().find(|&&v| !(v > 0.0 && v.is_finite())) {
        return Err(DpmsError::OutOfSupport { dist: "Gamma", value: bad });
    }
    Ok(tape.gamma_log_prob(x, p.shape, p.rate))
}

/// Per-row log density of full-covariance Gaussian rows (n×1).
///
/// Needs the factor to be constant on the tape (no gradient through `H⁻¹`).
pub fn full_cov_log_prob(tape: &mut Tape, p: &FullCovVars, x: Var) -> Result<Var> {
    if tape.shape(x) != tape.shape(p.mean) {
        let (r, c) = tape.shape(p.mean);
        let (xr, xc) = tape.shape(x);
        return Err(DpmsError::shape("full-covariance log_prob", &[r, c], &[xr, xc]));
    }
    let inv_t = constant_inverse_t(tape, p.factor, "full-covariance log_prob")?;
    let d = tape.shape(p.factor).0;
    let resid = tape.sub(x, p.mean);
    // rows of (x - m)·H⁻ᵀ
    let whitened = tape.matmul(resid, inv_t);
    let sq = tape.square(whitened);
    let quad = tape.sum_cols(sq);
    let quad = tape.scale(quad, -0.5);
    let logdet = tape.log_abs_det(p.factor);
    let n = tape.shape(x).0;
    let logdet = tape.broadcast_rows(logdet, n);
    let out = tape.sub(quad, logdet);
    Ok(tape.shift(out, -0.5 * d as f64 * LN_2PI))
}

fn constant_inverse_t(tape: &mut Tape, factor: Var, context: &str) -> Result<Var> {
    if tape.requires_grad(factor) {
        return Err(DpmsError::Invalid(format!("{context}: differentiating through a factor inverse is not supported")));
    }
    let h = tape.value(factor);
    let n = h.nrows();
    let m = nalgebra::DMatrix::from_fn(n, n, |i, j| h[[i, j]]);
    let inv = m
        .try_inverse()
        .ok_or_else(|| DpmsError::Invalid(format!("{context}: singular covariance factor")))?;
    Ok(tape.constant(Array2::from_shape_fn((n, n), |(i, j)| inv[(j, i)])))
}

/// Sum of elementwise `KL(q ‖ p)` for factorized Gaussians (1×1).
pub fn kl_gaussian(tape: &mut Tape, q: &GaussianVars, p: &GaussianVars) -> Result<Var> {
    if tape.shape(q.mean) != tape.shape(p.mean) {
        let (r, c) = tape.shape(p.mean);
        let (qr, qc) = tape.shape(q.mean);
        return Err(DpmsError::shape("gaussian KL", &[r, c], &[qr, qc]));
    }
    let kl = tape.kl_normal(q.mean, q.std, p.mean, p.std);
    Ok(tape.sum(kl))
}

/// Sum of elementwise `KL(q ‖ p)` for Gamma families (1×1).
pub fn kl_gamma(tape: &mut Tape, q: &GammaVars, p: &GammaVars) -> Result<Var> {
    if tape.shape(q.shape) != tape.shape(p.shape) {
        let (r, c) = tape.shape(p.shape);
        let (qr, qc) = tape.shape(q.shape);
        return Err(DpmsError::shape("gamma KL", &[r, c], &[qr, qc]));
    }
    let kl = tape.kl_gamma(q.shape, q.rate, p.shape, p.rate);
    Ok(tape.sum(kl))
}

/// `KL(q ‖ p)` for one full-covariance Gaussian (1×d mean) against a
/// diagonal Gaussian with the same event shape.
pub fn kl_full_cov_to_diag(tape: &mut Tape, q: &FullCovVars, p: &GaussianVars) -> Result<Var> {
    let (r, d) = tape.shape(q.mean);
    if tape.shape(p.mean) != (r, d) || r != 1 {
        let (pr, pc) = tape.shape(p.mean);
        return Err(DpmsError::shape("full-covariance KL", &[1, d], &[pr, pc]));
    }
    // row vector of per-dimension variances: Σ_jj = Σ_k H_jk²
    let hsq = tape.square(q.factor);
    let diag = tape.sum_cols(hsq);
    let diag = tape.transpose(diag);
    let resid = tape.sub(q.mean, p.mean);
    let resid_sq = tape.square(resid);
    let num = tape.add(diag, resid_sq);
    let var_p = tape.square(p.std);
    let ratio = tape.div(num, var_p);
    let trace_term = tape.sum(ratio);
    let log_sp = tape.ln(p.std);
    let log_sp = tape.sum(log_sp);
    let log_sp = tape.scale(log_sp, 2.0);
    let logdet_q = tape.log_abs_det(q.factor);
    let logdet_q = tape.scale(logdet_q, 2.0);
    let total = tape.add(trace_term, log_sp);
    let total = tape.sub(total, logdet_q);
    let total = tape.shift(total, -(d as f64));
    Ok(tape.scale(total, 0.5))
}

/// `KL(q ‖ p)` between full-covariance Gaussians (1×d means); `p` must be
/// constant on the tape.
pub fn kl_full_cov(tape: &mut Tape, q: &FullCovVars, p: &FullCovVars) -> Result<Var> {
    let (r, d) = tape.shape(q.mean);
    if tape.shape(p.mean) != (r, d) || r != 1 {
        let (pr, pc) = tape.shape(p.mean);
        return Err(DpmsError::shape("full-covariance KL", &[1, d], &[pr, pc]));
    }
    if tape.requires_grad(p.mean) {
        return Err(DpmsError::Invalid("full-covariance KL: prior mean must be constant".into()));
    }
    let inv_t = constant_inverse_t(tape, p.factor, "full-covariance KL")?;
    // tr(Σp⁻¹Σq) = ‖Lp⁻¹ Hq‖²_F with Lp⁻¹ = inv_tᵀ
    let inv = tape.transpose(inv_t);
    let white = tape.matmul(inv, q.factor);
    let white = tape.square(white);
    let trace = tape.sum(white);
    let resid = tape.sub(q.mean, p.mean);
    let wr = tape.matmul(resid, inv_t);
    let wr = tape.square(wr);
    let maha = tape.sum(wr);
    let ldq = tape.log_abs_det(q.factor);
    let ldp = tape.log_abs_det(p.factor);
    let ld = tape.sub(ldp, ldq);
    let ld = tape.scale(ld, 2.0);
    let total = tape.add(trace, maha);
    let total = tape.add(total, ld);
    let total = tape.shift(total, -(d as f64));
    Ok(tape.scale(total, 0.5))
}

/// Sum over rows of `KL(N(mean_i, H·Hᵀ) ‖ N(0, I))`.
pub fn kl_full_cov_rows_to_standard(tape: &mut Tape, q: &FullCovVars) -> Var {
    let (n, d) = tape.shape(q.mean);
    let msq = tape.square(q.mean);
    let msq = tape.sum(msq);
    let hsq = tape.square(q.factor);
    let trace = tape.sum(hsq);
    let trace = tape.scale(trace, n as f64);
    let logdet = tape.log_abs_det(q.factor);
    let logdet = tape.scale(logdet, -2.0 * n as f64);
    let total = tape.add(msq, trace);
    let total = tape.add(total, logdet);
    let total = tape.shift(total, -((n * d) as f64));
    tape.scale(total, 0.5)
}

/// Sum of elementwise Gaussian entropies (1×1).
pub fn gaussian_entropy(tape: &mut Tape, q: &GaussianVars) -> Var {
    let n = tape.value(q.std).len() as f64;
    let l = tape.ln(q.std);
    let s = tape.sum(l);
    tape.shift(s, 0.5 * n * (1.0 + LN_2PI))
}

/// Entropy of one full-covariance Gaussian.
pub fn full_cov_entropy(tape: &mut Tape, q: &FullCovVars) -> Var {
    let d = tape.shape(q.factor).0 as f64;
    let ld = tape.log_abs_det(q.factor);
    tape.shift(ld, 0.5 * d * (1.0 + LN_2PI))
}

/// Gamma entropy `a - ln b + lnΓ(a) + (1 - a)ψ(a)`, summed. Value only.
pub fn gamma_entropy(shape: &Array2<f64>, rate: &Array2<f64>) -> f64 {
    shape
        .iter()
        .zip(rate)
        .map(|(&a, &b)| a - b.ln() + ln_gamma(a) + (1.0 - a) * digamma(a))
        .sum()
}

/// Mean-field Gaussian with bounded standard deviations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeanFieldGaussian {
    pub mean: ParamId,
    pub raw_sigma: ParamId,
}

impl MeanFieldGaussian {
    /// Registers `<name>.mean` and `<name>.raw_sigma`.
    pub fn new(store: &mut ParamStore, name: &str, means: Array2<f64>, sigmas: &Array2<f64>) -> Result<Self> {
        if means.dim() != sigmas.dim() {
            return Err(DpmsError::shape(
                format!("{name} sigmas"),
                &[means.nrows(), means.ncols()],
                &[sigmas.nrows(), sigmas.ncols()],
            ));
        }
        let raw = raw_from(SIGMA_BOUNDS, sigmas)?;
        let mean = store.add(format!("{name}.mean"), means)?;
        let raw_sigma = store.add(format!("{name}.raw_sigma"), raw)?;
        Ok(Self { mean, raw_sigma })
    }

    pub fn vars(&self, tape: &mut Tape, store: &ParamStore) -> GaussianVars {
        let mean = tape.param(store, self.mean);
        let raw = tape.param(store, self.raw_sigma);
        let std = SIGMA_BOUNDS.apply(tape, raw);
        GaussianVars { mean, std }
    }

    pub fn shape(&self, store: &ParamStore) -> (usize, usize) {
        store.values(self.mean).dim()
    }

    pub fn means<'a>(&self, store: &'a ParamStore) -> &'a Array2<f64> {
        store.values(self.mean)
    }

    pub fn sigmas(&self, store: &ParamStore) -> Array2<f64> {
        store.values(self.raw_sigma).mapv(|r| SIGMA_BOUNDS.forward(r))
    }

    /// Overwrites parameters so the distribution equals `N(means, sigmas²)`.
    pub fn set(&self, store: &mut ParamStore, means: Array2<f64>, sigmas: &Array2<f64>) -> Result<()> {
        let raw = raw_from(SIGMA_BOUNDS, sigmas)?;
        store.set_values(self.mean, means)?;
        store.set_values(self.raw_sigma, raw)
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.mean, self.raw_sigma]
    }
}

/// Gamma distribution with bounded shape and rate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundedGamma {
    pub raw_shape: ParamId,
    pub raw_rate: ParamId,
}

impl BoundedGamma {
    /// Registers `<name>.raw_shape` and `<name>.raw_rate`.
    pub fn new(store: &mut ParamStore, name: &str, shapes: &Array2<f64>, rates: &Array2<f64>) -> Result<Self> {
        if shapes.dim() != rates.dim() {
            return Err(DpmsError::shape(
                format!("{name} rates"),
                &[shapes.nrows(), shapes.ncols()],
                &[rates.nrows(), rates.ncols()],
            ));
        }
        let raw_shape = store.add(format!("{name}.raw_shape"), raw_from(SHAPE_BOUNDS, shapes)?)?;
        let raw_rate = store.add(format!("{name}.raw_rate"), raw_from(RATE_BOUNDS, rates)?)?;
        Ok(Self { raw_shape, raw_rate })
    }

    pub fn vars(&self, tape: &mut Tape, store: &ParamStore) -> GammaVars {
        let a = tape.param(store, self.raw_shape);
        let b = tape.param(store, self.raw_rate);
        GammaVars {
            shape: SHAPE_BOUNDS.apply(tape, a),
            rate: RATE_BOUNDS.apply(tape, b),
        }
    }

    pub fn shapes(&self, store: &ParamStore) -> Array2<f64> {
        store.values(self.raw_shape).mapv(|r| SHAPE_BOUNDS.forward(r))
    }

    pub fn rates(&self, store: &ParamStore) -> Array2<f64> {
        store.values(self.raw_rate).mapv(|r| RATE_BOUNDS.forward(r))
    }

    pub fn means(&self, store: &ParamStore) -> Array2<f64> {
        self.shapes(store) / self.rates(store)
    }

    pub fn set(&self, store: &mut ParamStore, shapes: &Array2<f64>, rates: &Array2<f64>) -> Result<()> {
        store.set_values(self.raw_shape, raw_from(SHAPE_BOUNDS, shapes)?)?;
        store.set_values(self.raw_rate, raw_from(RATE_BOUNDS, rates)?)
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.raw_shape, self.raw_rate]
    }
}

/// Full-covariance Gaussian over a single d-vector (or over rows sharing a
/// covariance, when the mean block has several rows).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FullCovGaussian {
    pub mean: ParamId,
    pub factor: ParamId,
}

impl FullCovGaussian {
    /// Registers `<name>.mean` (rows × d) and `<name>.factor` (d × d).
    pub fn new(store: &mut ParamStore, name: &str, mean: Array2<f64>, factor: Array2<f64>) -> Result<Self> {
        let d = mean.ncols();
        if factor.dim() != (d, d) {
            return Err(DpmsError::shape(format!("{name} factor"), &[d, d], &[factor.nrows(), factor.ncols()]));
        }
        let mean = store.add(format!("{name}.mean"), mean)?;
        let factor = store.add(format!("{name}.factor"), factor)?;
        Ok(Self { mean, factor })
    }

    pub fn vars(&self, tape: &mut Tape, store: &ParamStore) -> FullCovVars {
        FullCovVars {
            mean: tape.param(store, self.mean),
            factor: tape.param(store, self.factor),
        }
    }

    pub fn covariance(&self, store: &ParamStore) -> Array2<f64> {
        let h = store.values(self.factor);
        h.dot(&h.t())
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.mean, self.factor]
    }
}

fn raw_from(transform: BoundedTransform, values: &Array2<f64>) -> Result<Array2<f64>> {
    let mut out = Array2::zeros(values.raw_dim());
    for (o, &v) in out.iter_mut().zip(values) {
        *o = transform.inverse_exact(v)?;
    }
    Ok(out)
}

/// Raw values for `values` under `transform`, bit-exact where representable.
pub fn raw_for(transform: BoundedTransform, values: &Array2<f64>) -> Result<Array2<f64>> {
    raw_from(transform, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn transforms_center_on_geometric_midpoint() {
        for t in [SIGMA_BOUNDS, SHAPE_BOUNDS, RATE_BOUNDS] {
            let mid = (t.lo * t.hi).sqrt();
            assert!((t.forward(0.0) - mid).abs() < 1e-9 * mid);
            assert!(t.forward(-50.0) >= t.lo && t.forward(50.0) <= t.hi);
        }
    }

    #[test]
    fn inverse_round_trips_to_rounding() {
        for t in [SIGMA_BOUNDS, SHAPE_BOUNDS, RATE_BOUNDS] {
            for &u in &[1e-4, 0.01, 0.37, 0.5, 0.93, 0.999] {
                let y = t.lo * (t.hi / t.lo).powf(u);
                let back = t.forward(t.inverse_exact(y).unwrap());
                assert!((back - y).abs() <= 1e-14 * y, "{y} -> {back}");
            }
        }
    }

    #[test]
    fn location_scale_sample() {
        let mut tape = Tape::new();
        let q = GaussianVars {
            mean: tape.constant(array![[2.0]]),
            std: tape.constant(array![[1.0]]),
        };
        let x = rsample_gaussian(&mut tape, &q, &array![[1.5]]).unwrap();
        assert_eq!(tape.value(x)[[0, 0]], 3.5);
        assert!(rsample_gaussian(&mut tape, &q, &array![[1.0, 2.0]]).is_err());
    }

    #[test]
    fn exponential_log_density() {
        let mut tape = Tape::new();
        let p = GammaVars {
            shape: tape.constant(array![[1.0]]),
            rate: tape.constant(array![[2.0]]),
        };
        let x = tape.constant(array![[0.5]]);
        let lp = gamma_log_prob(&mut tape, &p, x).unwrap();
        assert!((tape.value(lp)[[0, 0]] - (2f64.ln() - 1.0)).abs() < 1e-14);
        let bad = tape.constant(array![[-0.5]]);
        assert!(matches!(gamma_log_prob(&mut tape, &p, bad), Err(DpmsError::OutOfSupport { .. })));
    }

    #[test]
    fn full_cov_identity_at_mean() {
        let mut tape = Tape::new();
        let q = FullCovVars {
            mean: tape.constant(array![[0.3, -1.0, 2.0]]),
            factor: tape.constant(Array2::eye(3)),
        };
        let lp = full_cov_log_prob(&mut tape, &q, q.mean).unwrap();
        assert!((tape.value(lp)[[0, 0]] + 1.5 * LN_2PI).abs() < 1e-14);
    }

    #[test]
    fn unit_shift_gaussian_kl_is_half() {
        let mut tape = Tape::new();
        let q = GaussianVars {
            mean: tape.constant(array![[1.0]]),
            std: tape.constant(array![[1.0]]),
        };
        let p = GaussianVars {
            mean: tape.constant(array![[0.0]]),
            std: tape.constant(array![[1.0]]),
        };
        let kl = kl_gaussian(&mut tape, &q, &p).unwrap();
        assert!((tape.scalar_value(kl) - 0.5).abs() < 1e-15);
        let kl0 = kl_gaussian(&mut tape, &q, &q).unwrap();
        assert_eq!(tape.scalar_value(kl0), 0.0);
    }

    #[test]
    fn full_cov_kl_agrees_with_diag_special_case() {
        // with a diagonal factor both closed forms coincide
        let mut tape = Tape::new();
        let q = FullCovVars {
            mean: tape.constant(array![[0.2, -0.4]]),
            factor: tape.constant(array![[0.7, 0.0], [0.0, 1.3]]),
        };
        let pm = array![[1.0, 0.5]];
        let ps = array![[2.0, 0.8]];
        let p_diag = GaussianVars {
            mean: tape.constant(pm.clone()),
            std: tape.constant(ps.clone()),
        };
        let p_full = FullCovVars {
            mean: tape.constant(pm),
            factor: tape.constant(Array2::from_diag(&ps.row(0))),
        };
        let qd = GaussianVars {
            mean: q.mean,
            std: tape.constant(array![[0.7, 1.3]]),
        };
        let a = kl_full_cov_to_diag(&mut tape, &q, &p_diag).unwrap();
        let b = kl_full_cov(&mut tape, &q, &p_full).unwrap();
        let c = kl_gaussian(&mut tape, &qd, &p_diag).unwrap();
        let (a, b, c) = (tape.scalar_value(a), tape.scalar_value(b), tape.scalar_value(c));
        assert!((a - c).abs() < 1e-13 && (b - c).abs() < 1e-13, "{a} {b} {c}");
    }

    #[test]
    fn standard_normal_entropy() {
        let mut tape = Tape::new();
        let q = GaussianVars {
            mean: tape.constant(array![[0.0]]),
            std: tape.constant(array![[1.0]]),
        };
        let h = gaussian_entropy(&mut tape, &q);
        assert!((tape.scalar_value(h) - 0.5 * (LN_2PI + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn store_round_trip_of_constrained_values() {
        let mut store = ParamStore::new();
        let sig = array![[0.01, 0.5]];
        let q = MeanFieldGaussian::new(&mut store, "w", array![[1.0, 2.0]], &sig).unwrap();
        for (a, b) in q.sigmas(&store).iter().zip(&sig) {
            assert!((a - b).abs() <= 1e-15 * b);
        }
        let g = BoundedGamma::new(&mut store, "nu", &array![[10.0]], &array![[1000.0]]).unwrap();
        assert!((g.shapes(&store)[[0, 0]] - 10.0).abs() < 1e-13);
        assert!((g.rates(&store)[[0, 0]] - 1000.0).abs() < 1e-11);
    }
}
