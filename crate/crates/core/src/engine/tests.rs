use std::sync::Arc;

use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::*;
use crate::diffmath::{check_gradients, AdamState, GradCheckOptions, Tape};
use crate::shbf::GridLayout;

fn normal(rng: &mut ChaCha8Rng, shape: (usize, usize)) -> Array2<f64> {
    Array2::from_shape_simple_fn(shape, || rng.sample(StandardNormal))
}

fn props(rng: &mut ChaCha8Rng, d: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((d, 2), || rng.random_range(0.0..1.0))
}

fn regression_toy(seed: u64) -> SynthesisProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..2)
        .map(|s| {
            let (n, d) = (12, 5 + s);
            let x = normal(&mut rng, (n, d));
            let y = x.slice(s![.., 0..1]).mapv(|v| v.sin()) + 0.1 * normal(&mut rng, (n, 1));
            InstanceData {
                name: format!("i{s}"),
                x,
                y: Some(y),
                props: props(&mut rng, d),
            }
        })
        .collect();
    let setup = RegressionSetup {
        layout: GridLayout::uniform(&[0.0, 0.0], &[1.0, 1.0], &[4, 4], 0.5).unwrap(),
        low_dim: 1,
        outputs: 1,
        input_scale: 1.0,
        init: RegressionInit {
            posterior_mean_std: 0.3,
            posterior_sigma: 0.2,
            cpd_sigma: 0.5,
            prior_noise_rate: 30.0,
            posterior_noise_rate: 20.0,
            ..RegressionInit::default()
        },
    };
    SynthesisProblem::regression(data, &setup, &mut rng).unwrap()
}

fn linear_toy(n: usize, seed: u64) -> SynthesisProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = normal(&mut rng, (n, 3));
    let y = x.dot(&ndarray::array![[0.5], [-1.0], [2.0]]) + 0.3 * normal(&mut rng, (n, 1));
    let data = vec![InstanceData {
        name: "only".into(),
        x,
        y: Some(y),
        props: props(&mut rng, 3),
    }];
    let setup = LinearSetup {
        layout: GridLayout::uniform(&[0.0, 0.0], &[1.0, 1.0], &[2, 2], 0.0).unwrap(),
        columns: 1,
        noise_std: 0.3,
        posterior: PosteriorFamily::MeanField,
        cpd_mean: 0.0,
        cpd_sigma: 1.0,
        posterior_sigma: 0.5,
    };
    SynthesisProblem::linear(data, &setup).unwrap()
}

fn fa_toy(seed: u64) -> SynthesisProblem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..2)
        .map(|s| {
            let (n, d) = (10, 4 + s);
            InstanceData {
                name: format!("f{s}"),
                x: normal(&mut rng, (n, d)),
                y: None,
                props: props(&mut rng, d),
            }
        })
        .collect();
    let setup = FaSetup {
        layout: GridLayout::uniform(&[0.0, 0.0], &[1.0, 1.0], &[3, 3], 0.0).unwrap(),
        latent_dim: 2,
        init: FaInit {
            cpd_sigma: 0.5,
            posterior_sigma: 0.3,
            ..FaInit::default()
        },
    };
    let mut p = SynthesisProblem::factor_analysis(data, &setup).unwrap();
    // move away from the symmetric zero initialization
    for inst in p.layout.instances.clone() {
        let ids = inst.weights.ids();
        let shape = p.store.values(ids[0]).dim();
        p.store.set_values(ids[0], 0.3 * normal(&mut rng, shape)).unwrap();
        let lat = inst.latents.unwrap();
        let shape = p.store.values(lat.mean).dim();
        p.store.set_values(lat.mean, 0.5 * normal(&mut rng, shape)).unwrap();
    }
    p
}

fn assert_gradients(problem: &SynthesisProblem, batch: bool) {
    let batches: Vec<Option<Arc<[usize]>>> = problem
        .data
        .iter()
        .map(|d| batch.then(|| Arc::from((0..d.samples()).step_by(2).collect::<Vec<_>>())))
        .collect();
    let report = check_gradients(
        &problem.store,
        |store, tape| record_total(tape, store, problem, &batches, 11, &ElboOptions::default()),
        &GradCheckOptions::default(),
    )
    .unwrap();
    for b in &report.blocks {
        assert!(b.max_rel_err < 1e-4, "{}: {} ({} vs {}, entry {}, value {})", b.block, b.max_rel_err, b.analytic, b.numeric, b.worst_entry, report.value);
    }
}

#[test]
fn gradients_match_finite_differences_for_every_objective() {
    assert_gradients(&linear_toy(8, 1), false);
    assert_gradients(&regression_toy(2), true);
    assert_gradients(&fa_toy(3), true);
}

#[test]
fn full_batch_has_unit_scale() {
    let p = linear_toy(6, 4);
    let r = full_elbo(&p, 0, &ElboOptions::default()).unwrap();
    assert_eq!(r.terms[0].scale, 1.0);
    let t = r.terms[0];
    assert!((t.total - (t.log_lik - t.kl_props - t.kl_no_props - t.kl_latent)).abs() < 1e-12);
}

#[test]
fn minibatch_scaling_is_unbiased() {
    let p = regression_toy(5);
    let full = {
        let mut tape = Tape::new();
        let mut rng = rng::stream(3, p.streams[0], 0, 0, rng::Purpose::Noise);
        record_instance(&mut tape, &p.store, &p, 0, None, &mut rng, &ElboOptions::default()).unwrap().1
    };
    let mut batch_rng = ChaCha8Rng::seed_from_u64(99);
    let reps = 2000;
    let mut vals = Vec::with_capacity(reps);
    for _ in 0..reps {
        let b = rng::epoch_batches(p.data[0].samples(), 0.5, &mut batch_rng)[0].clone();
        let mut tape = Tape::new();
        // identical noise stream, so the parameter draw matches the full-batch one
        let mut rng = rng::stream(3, p.streams[0], 0, 0, rng::Purpose::Noise);
        let t = record_instance(&mut tape, &p.store, &p, 0, Some(&b), &mut rng, &ElboOptions::default()).unwrap().1;
        vals.push(t.log_lik);
    }
    let mean = vals.iter().sum::<f64>() / reps as f64;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (reps - 1) as f64;
    let se = (var / reps as f64).sqrt();
    assert!((mean - full.log_lik).abs() < 3.0 * se, "{mean} vs {} (se {se})", full.log_lik);
}

#[test]
fn posteriors_equal_to_priors_have_zero_kl() {
    let mut p = linear_toy(6, 7);
    let inst = p.instance(0).clone();
    let WeightPosterior::MeanField(q) = inst.weights else { unreachable!() };
    let (mu, _) = p.layout.weight_cpd.parameters(&p.store, &p.memberships[0]);
    p.store.set_values(q.mean, mu).unwrap();
    let cfg = TrainConfig::new(0, LrSchedule::constant(0.01), 1);
    constrained_posterior_init(&mut p, &cfg).unwrap();
    let r = full_elbo(&p, 0, &ElboOptions::default()).unwrap();
    assert_eq!(r.terms[0].kl_props, 0.0);
    assert_eq!(r.terms[0].total, r.terms[0].log_lik);
}

#[test]
fn zero_epoch_fit_changes_nothing() {
    let mut p = regression_toy(6);
    let before = p.store.snapshot();
    let mut adam = AdamState::new(&p.store);
    let out = fit(&mut p, &mut adam, &TrainConfig::new(0, LrSchedule::constant(0.1), 1), 0, None).unwrap();
    assert_eq!(out.epochs_run, 0);
    assert_eq!(p.store.snapshot(), before);
}

#[test]
fn fit_improves_training_elbo() {
    let mut p = regression_toy(8);
    let mut adam = AdamState::new(&p.store);
    let mut cfg = TrainConfig::new(300, LrSchedule::constant(0.02), 4);
    cfg.checkpoint_every = 50;
    let out = fit(&mut p, &mut adam, &cfg, 0, None).unwrap();
    let w = 100;
    let first: f64 = out.trace[..w].iter().sum::<f64>() / w as f64;
    let last: f64 = out.trace[out.trace.len() - w..].iter().sum::<f64>() / w as f64;
    assert!(last > first, "{first} -> {last}");
    assert_eq!(out.history.len(), 6);
}

#[test]
fn single_instance_fit_uses_the_same_path() {
    let p = regression_toy(9);
    let iso = p.clone().restrict_to(1).unwrap();
    assert_eq!(iso.len(), 1);
    assert_eq!(iso.data[0].name, "i1");
    // the restricted instance's ELBO terms are identical to those in the joint problem
    let joint = full_elbo(&p, 3, &ElboOptions::default()).unwrap();
    let alone = full_elbo(&iso, 3, &ElboOptions::default()).unwrap();
    assert_eq!(joint.terms[1], alone.terms[0]);
}

#[test]
fn constrained_init_pins_posteriors_to_cpd() {
    let mut p = regression_toy(10);
    let sigma_ids = p.cpd_sigma_ids();
    let mut cfg = TrainConfig::new(20, LrSchedule::constant(0.01), 2);
    cfg.checkpoint_every = 10;
    let frozen_before: Vec<_> = sigma_ids.iter().map(|&id| p.store.values(id).clone()).collect();
    constrained_posterior_init(&mut p, &cfg).unwrap();
    // σ fields only receive the exact-representation nudge, never optimizer updates
    let pinned: Vec<_> = sigma_ids.iter().map(|&id| p.store.values(id).clone()).collect();
    for (a, b) in frozen_before.iter().zip(&pinned) {
        assert!((a - b).iter().all(|d| d.abs() < 1e-12));
    }
    for (s, d) in p.data.iter().enumerate() {
        let WeightPosterior::MeanField(q) = p.instance(s).weights else { unreachable!() };
        let kl = p.layout.weight_cpd.kl_from(&p.store, &q, &d.props).unwrap();
        assert_eq!(kl, 0.0, "instance {s}");
    }
    assert!(sigma_ids.iter().all(|&id| !p.store.is_frozen(id)));
    assert_eq!(p.mode, PosteriorMode::Free);
}

#[test]
fn frozen_sigma_fields_are_not_updated_while_tied() {
    let mut p = regression_toy(12);
    let mut cfg = TrainConfig::new(1, LrSchedule::constant(0.01), 2);
    cfg.checkpoint_every = 1;
    constrained_posterior_init(&mut p, &cfg).unwrap();
    let ids = p.cpd_sigma_ids();
    let pinned: Vec<_> = ids.iter().map(|&id| p.store.values(id).clone()).collect();
    cfg.epochs = 10;
    constrained_posterior_init(&mut p, &cfg).unwrap();
    for (&id, v) in ids.iter().zip(&pinned) {
        let now = p.store.values(id);
        assert!(now.iter().zip(v).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let mut p = fa_toy(13);
    let mut adam = AdamState::new(&p.store);
    let cfg = TrainConfig::new(3, LrSchedule::constant(0.01), 5);
    fit(&mut p, &mut adam, &cfg, 0, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let info = CheckpointInfo {
        epoch: 3,
        phase: "fit".into(),
        history: vec![],
        trace: vec![],
        config: serde_json::to_value(&cfg).unwrap(),
    };
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    save_checkpoint(&p, &adam, &info, &a).unwrap();
    let (q, adam2, manifest) = restore_problem(&a, p.data.clone()).unwrap();
    assert_eq!(manifest.epoch, 3);
    assert_eq!(adam2, adam);
    save_checkpoint(&q, &adam2, &info, &b).unwrap();
    for entry in std::fs::read_dir(&a).unwrap() {
        let entry = entry.unwrap();
        let other = std::fs::read(b.join(entry.file_name())).unwrap();
        assert_eq!(std::fs::read(entry.path()).unwrap(), other, "{:?}", entry.file_name());
    }
    let e1 = full_elbo(&p, 4, &ElboOptions::default()).unwrap().total;
    let e2 = full_elbo(&q, 4, &ElboOptions::default()).unwrap().total;
    assert!((e1 - e2).abs() <= 1e-12 * e1.abs().max(1.0));
}

#[test]
fn test_elbo_on_training_data_matches_training_elbo() {
    let p = regression_toy(14);
    let tests: Vec<InstanceTest> = p
        .data
        .iter()
        .map(|d| InstanceTest {
            x: d.x.clone(),
            y: d.y.clone(),
        })
        .collect();
    let test = eval_test_elbo(&p, &tests, None, 1, 21).unwrap();
    let train = full_elbo(&p, 21, &ElboOptions::default()).unwrap();
    for (a, b) in test.iter().zip(&train.terms) {
        assert_eq!(a.elbo, b.total);
    }
}

#[test]
fn non_finite_terms_name_the_instance() {
    let mut p = linear_toy(4, 15);
    let inst = p.instance(0).clone();
    p.store.values_mut(inst.weights.ids()[0]).fill(f64::NAN);
    let err = full_elbo(&p, 0, &ElboOptions::default()).unwrap_err().to_string();
    assert!(err.contains("only"), "{err}");
}

#[test]
fn sampled_kl_is_unbiased() {
    let p = regression_toy(16);
    let analytic = full_elbo(&p, 0, &ElboOptions::default()).unwrap().terms[0].kl_props;
    let opts = ElboOptions {
        samples: 4000,
        sampled_kl: true,
    };
    let est = full_elbo(&p, 1, &opts).unwrap().terms[0].kl_props;
    assert!((est - analytic).abs() < 0.05 * analytic.abs().max(1.0), "{est} vs {analytic}");
}
