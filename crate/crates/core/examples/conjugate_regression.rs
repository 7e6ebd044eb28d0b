//! Bayesian linear regression with a known prior: the fitted
//! full-covariance posterior and its ELBO against the exact answers.

use dpms::diffmath::AdamState;
use dpms::engine::{fit, full_elbo, ElboOptions, InstanceData, LinearSetup, LrSchedule, PosteriorFamily, SynthesisProblem, TrainConfig, WeightPosterior};
use dpms::shbf::GridLayout;
use nalgebra::{DMatrix, DVector};
use ndarray::{array, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn main() -> dpms::Result<()> {
    let (n, sigma) = (20, 0.5);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Array2::from_shape_simple_fn((n, 2), || rng.sample::<f64, _>(StandardNormal));
    let y = x.dot(&array![[0.8], [-1.2]]) + Array2::from_shape_simple_fn((n, 1), || sigma * rng.sample::<f64, _>(StandardNormal));

    let xm = DMatrix::from_fn(n, 2, |i, j| x[[i, j]]);
    let yv = DVector::from_iterator(n, y.iter().copied());
    let cov = (xm.transpose() * &xm / (sigma * sigma) + DMatrix::identity(2, 2)).try_inverse().unwrap();
    let mean = &cov * xm.transpose() * &yv / (sigma * sigma);
    let marginal = &xm * xm.transpose() + DMatrix::identity(n, n) * (sigma * sigma);
    let chol = marginal.cholesky().unwrap();
    let evidence = -0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln()
        - chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>()
        - 0.5 * yv.dot(&chol.solve(&yv));

    let data = vec![InstanceData { name: "toy".into(), x, y: Some(y), props: array![[0.5]] }];
    let setup = LinearSetup {
        layout: GridLayout::uniform(&[0.0], &[1.0], &[1], 0.0)?,
        columns: 2,
        noise_std: sigma,
        posterior: PosteriorFamily::FullCov,
        cpd_mean: 0.0,
        cpd_sigma: 1.0,
        posterior_sigma: 1.0,
    };
    let mut p = SynthesisProblem::linear(data, &setup)?;
    let cpd = p.layout.weight_cpd.clone();
    for id in cpd.mean_ids().into_iter().chain(cpd.sigma_ids()) {
        p.store.set_frozen(id, true);
    }
    let mut cfg = TrainConfig::new(6000, LrSchedule(vec![(0, 0.05), (2000, 0.01), (4000, 0.001)]), 1);
    cfg.elbo.samples = 32;
    let mut adam = AdamState::new(&p.store);
    fit(&mut p, &mut adam, &cfg, 0, None)?;

    let WeightPosterior::FullCov(q) = &p.layout.instances[0].weights else { unreachable!() };
    println!("exact mean  {:?}", mean.as_slice());
    println!("fitted mean {:?}", p.store.values(q.mean).as_slice().unwrap());
    println!("exact cov   {:?}", cov.as_slice());
    println!("fitted cov  {:?}", q.covariance(&p.store).as_slice().unwrap());
    let elbo = full_elbo(&p, 0, &ElboOptions { samples: 10_000, sampled_kl: false })?.total;
    println!("log evidence {evidence:.4}, ELBO estimate {elbo:.4}");
    Ok(())
}
