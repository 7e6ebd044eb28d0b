//! Factor-analysis synthesis across behavioral regimes: instances trained on
//! different regimes (db) against all on the target's regime (sb), scored on
//! the regimes the target never saw.
//!
//! `cargo run --release --example fa_db_sb -- [seed]`

use dpms::experiments::fa::{compare, FaFit};
use dpms::synthgen::{gen_fa_multibehavior, FaSpec, ScaleSpec};

fn main() -> dpms::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let seed: u64 = std::env::args().nth(1).map_or(1, |s| s.parse().expect("seed"));
    let scenario = gen_fa_multibehavior(&FaSpec::default(), seed, &ScaleSpec::FULL)?;
    let cmp = compare(&scenario, &FaFit::default(), seed)?;
    for t in &cmp.targets {
        println!(
            "{}: off-regime ELBO per sample db {:.2}, sb {:.2}",
            t.target,
            t.db.normalized_elbo.unwrap_or(f64::NAN),
            t.sb.normalized_elbo.unwrap_or(f64::NAN)
        );
    }
    println!(
        "loading alignment: synthesized {:.3}, independent EM {:.3}",
        cmp.synthesized_alignment, cmp.independent_alignment
    );
    Ok(())
}
