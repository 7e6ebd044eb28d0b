//! Fit a little, checkpoint, restore, and confirm the ELBO is unchanged.

use dpms::diffmath::AdamState;
use dpms::engine::{fit, full_elbo, restore_problem, save_checkpoint, CheckpointInfo, ElboOptions, LrSchedule, TrainConfig};
use dpms::experiments::linear::{build_problem, LinearFit};
use dpms::synthgen::gen_linear_one_sample;

fn main() -> dpms::Result<()> {
    let data = gen_linear_one_sample(10, 4);
    let mut p = build_problem(&data, &LinearFit::default())?;
    let cfg = TrainConfig::new(50, LrSchedule::constant(0.05), 4);
    let mut adam = AdamState::new(&p.store);
    let outcome = fit(&mut p, &mut adam, &cfg, 0, None)?;

    let dir = std::env::temp_dir().join(format!("dpms-checkpoint-{}", std::process::id()));
    let info = CheckpointInfo {
        epoch: outcome.epochs_run,
        phase: "fit".into(),
        history: outcome.history,
        trace: outcome.trace,
        config: serde_json::to_value(&cfg).expect("config serializes"),
    };
    let manifest = save_checkpoint(&p, &adam, &info, &dir)?;
    let (restored, _, _) = restore_problem(&dir, p.data.clone())?;
    let before = full_elbo(&p, 0, &ElboOptions::default())?.total;
    let after = full_elbo(&restored, 0, &ElboOptions::default())?.total;
    println!("checkpoint at epoch {} in {}", manifest.epoch, dir.display());
    println!("ELBO before {before:.12}, after {after:.12}");
    std::fs::remove_dir_all(&dir).ok();
    Ok(())
}
