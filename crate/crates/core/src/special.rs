//! Special functions used by the Gamma family and its reparameterized sampler.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

pub use statrs::function::gamma::{digamma, ln_gamma};

pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Second derivative of `ln Γ`.
pub fn trigamma(x: f64) -> f64 {
    if x <= 0.0 && x == x.floor() {
        return f64::INFINITY;
    }
    if x < 0.0 {
        // reflection: ψ1(1-x) + ψ1(x) = π² / sin²(πx)
        let s = (PI * x).sin();
        return -trigamma(1.0 - x) + PI * PI / (s * s);
    }
    let mut x = x;
    let mut acc = 0.0;
    while x < 10.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let tail = 1.0 / 6.0 - inv2 * (1.0 / 30.0 - inv2 * (1.0 / 42.0 - inv2 * (1.0 / 30.0 - inv2 * 5.0 / 66.0)));
    acc + inv + 0.5 * inv2 + inv * inv2 * tail
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-x * FRAC_1_SQRT_2)
}

/// Regularized lower incomplete gamma `P(a, x)`.
pub fn gamma_p(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    statrs::function::gamma::gamma_lr(a, x)
}

/// Regularized upper incomplete gamma `Q(a, x) = 1 - P(a, x)`.
pub fn gamma_q(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    statrs::function::gamma::gamma_ur(a, x)
}

/// Log density of the unit-rate Gamma distribution.
pub fn ln_gamma_density(a: f64, x: f64) -> f64 {
    (a - 1.0) * x.ln() - x - ln_gamma(a)
}

/// `∂P(a, x)/∂a` from the power series
/// `P = Σ_n exp((a+n) ln x - x - lnΓ(a+n+1))`, differentiated termwise.
pub fn gamma_p_dshape(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let ln_x = x.ln();
    let mut term = (a * ln_x - x - ln_gamma(a + 1.0)).exp();
    let mut psi = digamma(a + 1.0);
    let mut sum = term * (ln_x - psi);
    let mut total = term;
    let mut n = 0.0;
    loop {
        n += 1.0;
        let denom = a + n;
        term *= x / denom;
        psi += 1.0 / denom;
        sum += term * (ln_x - psi);
        total += term;
        if denom > x && term <= total * 1e-17 {
            break;
        }
        if n > 1e6 {
            break;
        }
    }
    sum
}

/// Quantile of the unit-rate Gamma(a) distribution at probability `Φ(eps)`.
///
/// `eps` is a standard normal draw, so the map `eps ↦ x` is a smooth
/// reparameterization of Gamma sampling. The upper half is solved against
/// `Q` to keep tail probabilities accurate.
pub fn gamma_standard_quantile(a: f64, eps: f64) -> f64 {
    let upper = eps > 0.0;
    let target = if upper { normal_cdf(-eps) } else { normal_cdf(eps) };
    if target <= 0.0 {
        return if upper { f64::INFINITY } else { 0.0 };
    }
    // residual is increasing in x on both branches
    let residual = |x: f64| -> f64 {
        if upper {
            target - gamma_q(a, x)
        } else {
            gamma_p(a, x) - target
        }
    };

    // Wilson-Hilferty start
    let wh = 1.0 - 1.0 / (9.0 * a) + eps / (3.0 * a.sqrt());
    let mut x = if wh > 0.05 {
        a * wh * wh * wh
    } else {
        // lower tail: P(a, x) ≈ x^a / Γ(a + 1)
        ((target.ln() + ln_gamma(a + 1.0)) / a).exp()
    };
    if !(x.is_finite() && x > 0.0) {
        x = a;
    }

    let (mut lo, mut hi) = (0.0_f64, f64::INFINITY);
    for _ in 0..200 {
        let r = residual(x);
        if r == 0.0 {
            return x;
        }
        if r > 0.0 {
            hi = hi.min(x);
        } else {
            lo = lo.max(x);
        }
        let density = ln_gamma_density(a, x).exp();
        let mut next = if density > 0.0 { x - r / density } else { f64::NAN };
        if !(next > lo && next < hi) || !next.is_finite() {
            next = if hi.is_finite() {
                if lo > 0.0 {
                    (lo * hi).sqrt()
                } else {
                    0.5 * hi
                }
            } else {
                2.0 * x.max(lo)
            };
        }
        if (next - x).abs() <= 4.0 * f64::EPSILON * x {
            return next;
        }
        x = next;
    }
    x
}

/// `∂x/∂a` for `x = gamma_standard_quantile(a, eps)` with `eps` held fixed,
/// by implicit differentiation of `P(a, x) = Φ(eps)`.
pub fn gamma_quantile_dshape(a: f64, x: f64) -> f64 {
    if x <= 0.0 || !x.is_finite() {
        return 0.0;
    }
    let density = ln_gamma_density(a, x).exp();
    if density == 0.0 {
        return 0.0;
    }
    -gamma_p_dshape(a, x) / density
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trigamma_known_values() {
        // ψ1(1) = π²/6, ψ1(1/2) = π²/2
        assert!((trigamma(1.0) - PI * PI / 6.0).abs() < 1e-13);
        assert!((trigamma(0.5) - PI * PI / 2.0).abs() < 1e-12);
        // recurrence ψ1(x+1) = ψ1(x) - 1/x²
        for &x in &[0.3, 2.7, 11.0, 250.0] {
            let lhs = trigamma(x + 1.0);
            let rhs = trigamma(x) - 1.0 / (x * x);
            assert!((lhs - rhs).abs() < 1e-12 * rhs.abs().max(1.0), "x={x}");
        }
    }

    #[test]
    fn trigamma_matches_digamma_difference() {
        for &x in &[1.0, 3.5, 10.0, 999.0] {
            let h = 1e-5 * x;
            let fd = (digamma(x + h) - digamma(x - h)) / (2.0 * h);
            assert!((fd - trigamma(x)).abs() < 1e-6 * trigamma(x), "x={x}");
        }
    }

    #[test]
    fn exponential_quantile_closed_form() {
        // Gamma(1) is Exp(1): x = -ln(1 - u)
        for &eps in &[-3.0, -0.7, 0.0, 0.4, 2.5, 5.0] {
            let x = gamma_standard_quantile(1.0, eps);
            let expected = -normal_cdf(-eps).ln();
            assert!((x - expected).abs() < 1e-12 * expected.max(1e-3), "eps={eps}: {x} vs {expected}");
        }
    }

    #[test]
    fn quantile_inverts_cdf() {
        for &a in &[1.0, 2.5, 10.0, 137.0, 1000.0] {
            for &eps in &[-4.0, -1.3, 0.0, 0.9, 3.7] {
                let x = gamma_standard_quantile(a, eps);
                let p = if eps > 0.0 { 1.0 - gamma_q(a, x) } else { gamma_p(a, x) };
                assert!((p - normal_cdf(eps)).abs() < 1e-12, "a={a} eps={eps}");
            }
        }
    }

    #[test]
    fn dshape_matches_finite_difference() {
        for &a in &[1.0, 3.0, 10.0, 400.0] {
            for &eps in &[-2.0, -0.5, 0.3, 2.2] {
                let x = gamma_standard_quantile(a, eps);
                let h = 1e-5 * a;
                let fd = (gamma_standard_quantile(a + h, eps) - gamma_standard_quantile(a - h, eps)) / (2.0 * h);
                let an = gamma_quantile_dshape(a, x);
                assert!((fd - an).abs() <= 1e-6 * an.abs().max(1e-3), "a={a} eps={eps}: {an} vs {fd}");
            }
        }
    }
}
