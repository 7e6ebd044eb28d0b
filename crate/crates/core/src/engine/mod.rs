//! ELBO assembly, training, constrained initialization, held-out evaluation
//! and checkpoints.

pub mod checkpoint;
pub mod elbo;
pub mod evaluate;
pub mod fit;
pub mod init;
pub mod problem;
pub mod rng;

pub use checkpoint::{load_checkpoint, restore_problem, save_checkpoint, CheckpointInfo, CheckpointManifest, VERSION};
pub use elbo::{elbo_step, record_instance, record_total, ElboOptions, ElboTerms, StepResult};
pub use evaluate::{eval_test_elbo, full_elbo, mean_r2, predict_mean, InstanceTest, RefitOptions, TestElbo};
pub use fit::{fit, fit_continuing, EarlyStop, FitOutcome, LrSchedule, MetricRecord, TrainConfig};
pub use init::constrained_posterior_init;
pub use problem::*;

#[cfg(test)]
mod tests;
