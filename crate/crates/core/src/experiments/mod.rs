//! Experiment drivers shared by the CLI, the examples and the acceptance
//! suite: problem construction from generated data, fitting schedules and
//! metric reports.

pub mod fa;
pub mod linear;
pub mod sim_brain;

use crate::engine::TrainConfig;

/// Copy of `config` drawing its randomness from `seed`.
pub(crate) fn seeded(config: &TrainConfig, seed: u64) -> TrainConfig {
    TrainConfig { seed, ..config.clone() }
}
