//! One sample per system: the learned CPD approaches the ground truth as
//! the number of systems grows.
//!
//! `cargo run --release --example linear_one_sample -- [simulations]`

use dpms::experiments::linear::{simulate, LinearFit};

fn main() -> dpms::Result<()> {
    let sims: u64 = std::env::args().nth(1).map_or(10, |s| s.parse().expect("simulations"));
    let cfg = LinearFit::default();
    println!("{:>4} {:>10} {:>16}", "S", "mean RMSE", "var geomean");
    for s in [1usize, 5, 10, 25, 50] {
        let fits = (0..sims).map(|k| simulate(s, 1000 + k, &cfg)).collect::<dpms::Result<Vec<_>>>()?;
        let rmse = fits.iter().map(|f| f.mean_rmse).sum::<f64>() / sims as f64;
        let geomean = fits.iter().map(|f| f.variance_geomean).sum::<f64>() / sims as f64;
        println!("{s:>4} {rmse:>10.3} {geomean:>16.3}");
    }
    Ok(())
}
