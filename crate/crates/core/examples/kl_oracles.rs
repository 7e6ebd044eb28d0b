//! Closed-form Gaussian and Gamma KL divergences from the tape, checked
//! against Monte Carlo.

use dpms::diffmath::Tape;
use dpms::distributions::{kl_gamma, kl_gaussian, GammaVars, GaussianVars};
use ndarray::array;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Gamma, Normal};
use statrs::function::gamma::ln_gamma;

fn ln_gamma_pdf(a: f64, b: f64, x: f64) -> f64 {
    a * b.ln() - ln_gamma(a) + (a - 1.0) * x.ln() - b * x
}

fn main() -> dpms::Result<()> {
    let mut tape = Tape::new();
    let q = GaussianVars { mean: tape.constant(array![[0.5]]), std: tape.constant(array![[0.8]]) };
    let p = GaussianVars { mean: tape.constant(array![[-0.2]]), std: tape.constant(array![[1.3]]) };
    let kl = kl_gaussian(&mut tape, &q, &p)?;
    let qg = GammaVars { shape: tape.constant(array![[3.0]]), rate: tape.constant(array![[2.0]]) };
    let pg = GammaVars { shape: tape.constant(array![[5.0]]), rate: tape.constant(array![[1.5]]) };
    let klg = kl_gamma(&mut tape, &qg, &pg)?;

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let n = 200_000;
    let (nq, np) = (Normal::new(0.5, 0.8).unwrap(), Normal::new(-0.2, 1.3).unwrap());
    let ln_n = |d: &Normal<f64>, x: f64| {
        let z = (x - d.mean()) / d.std_dev();
        -0.5 * z * z - d.std_dev().ln()
    };
    let mc: f64 = (0..n).map(|_| {
        let x = rng.sample(nq);
        ln_n(&nq, x) - ln_n(&np, x)
    }).sum::<f64>() / n as f64;
    println!("Gaussian KL: analytic {:.5}, Monte Carlo {mc:.5}", tape.scalar_value(kl));

    let gq = Gamma::new(3.0, 0.5).unwrap();
    let mc: f64 = (0..n).map(|_| {
        let x: f64 = rng.sample(gq);
        ln_gamma_pdf(3.0, 2.0, x) - ln_gamma_pdf(5.0, 1.5, x)
    }).sum::<f64>() / n as f64;
    println!("Gamma KL:    analytic {:.5}, Monte Carlo {mc:.5}", tape.scalar_value(klg));
    Ok(())
}
