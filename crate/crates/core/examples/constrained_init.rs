//! Constrained posterior initialization on a sign-symmetric problem: every
//! instance's weights start from the shared CPD, so they agree in sign.

use dpms::engine::{constrained_posterior_init, full_elbo, ElboOptions, InstanceData, LrSchedule, RegressionInit, RegressionSetup, SynthesisProblem, TrainConfig};
use dpms::shbf::GridLayout;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn main() -> dpms::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut truths = Vec::new();
    let data = (0..4)
        .map(|s| {
            let d = 16;
            let props: Array2<f64> = Array2::from_shape_simple_fn((d, 2), || rng.random_range(0.0..1.0));
            let omega = Array2::from_shape_fn((d, 1), |(i, _)| 1.0 + 0.5 * (6.0 * props[[i, 0]]).sin() * props[[i, 1]]);
            let x = Array2::from_shape_simple_fn((200, d), || rng.sample::<f64, _>(StandardNormal));
            let l = x.dot(&omega) / omega.iter().map(|v| v * v).sum::<f64>().sqrt();
            let y = l.mapv(|v| (2.0 * v).tanh() + 0.3 * v);
            truths.push(omega);
            InstanceData { name: format!("toy{s}"), x, y: Some(y), props }
        })
        .collect();
    let setup = RegressionSetup {
        layout: GridLayout::uniform(&[0.0, 0.0], &[1.0, 1.0], &[4, 4], 0.5)?,
        low_dim: 1,
        outputs: 1,
        input_scale: 1.0,
        init: RegressionInit { posterior_mean_std: 0.5, prior_noise_rate: 10.0, posterior_noise_rate: 10.0, ..RegressionInit::default() },
    };
    let mut p = SynthesisProblem::regression(data, &setup, &mut rng)?;
    let sign = |p: &SynthesisProblem, s: usize| (p.instance(s).weights.means(&p.store) * &truths[s]).sum().signum();

    println!("signs before: {:?}", (0..p.len()).map(|s| sign(&p, s)).collect::<Vec<_>>());
    constrained_posterior_init(&mut p, &TrainConfig::new(300, LrSchedule::constant(0.02), 8))?;
    println!("signs after:  {:?}", (0..p.len()).map(|s| sign(&p, s)).collect::<Vec<_>>());
    let terms = full_elbo(&p, 0, &ElboOptions::default())?.terms;
    println!("KL[q_props‖CPD] per instance: {:?}", terms.iter().map(|t| t.kl_props).collect::<Vec<_>>());
    Ok(())
}
