//! Simulated ecosystem of brains: generate a desk-scale dataset, fit a
//! synthesized model and one isolated model per brain, and compare them.
//!
//! `cargo run --release --example sim_brain -- [seed] [train_epochs]`

use dpms::experiments::sim_brain::{compare, SimBrainComparison, SimBrainFit};
use dpms::synthgen::{gen_sim_brain, ScaleSpec, SimBrainSpec};

fn main() -> dpms::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().map_or(1, |s| s.parse().expect("seed"));
    let brain = gen_sim_brain(&SimBrainSpec::default(), &ScaleSpec::default(), seed)?;
    let mut cfg = SimBrainFit::default();
    if let Some(e) = args.next() {
        cfg.train.epochs = e.parse().expect("epochs");
    }
    println!("{} brains, {} to {} neurons", brain.instances.len(),
        brain.instances.iter().map(|i| i.omega.len()).min().unwrap_or(0),
        brain.instances.iter().map(|i| i.omega.len()).max().unwrap_or(0));

    let cmp = compare(&brain, &cfg, seed)?;
    for (name, rows) in [("synthesized", &cmp.synthesized), ("isolated", &cmp.isolated)] {
        println!(
            "{name:>12}: mean test R² {:.3}, OOD R² > 0 for {:.0}% of brains",
            SimBrainComparison::mean_test_r2(rows),
            100.0 * SimBrainComparison::positive_ood_fraction(rows)
        );
    }
    println!("learned CPD mean vs truth: Pearson {:.3} after scaling by k = {:.3}", cmp.mean_field.pearson, cmp.mean_field.k);
    Ok(())
}
