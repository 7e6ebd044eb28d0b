//! Ground-truth generators for the simulated experiments.

mod bumps;
pub mod dataset;
pub mod fa;
pub mod linear;
pub mod sim_brain;

pub use bumps::{BumpFunction, GroundTruthCpd, BUMP_WIDTH};
pub use dataset::{Dataset, DatasetInstance};
pub use fa::{fa_instance_name, gen_fa_multibehavior, FaGroundTruth, FaInstance, FaScenario, FaSpec, Regime, RegimeData};
pub use linear::{gen_linear_one_sample, LinearInstance, LinearOneSample, LINEAR_NOISE_STD, LINEAR_TRUE_MEAN};
pub use sim_brain::{gen_ground_truth_cpd, instance_name, gen_instance, gen_ood_data, gen_sim_brain, shared_function, ScaleSpec, SimBrain, SimBrainSpec, SimInstance, Split};

use rand_chacha::ChaCha8Rng;

use crate::engine::rng::{derive_seed, Purpose};
use rand::SeedableRng;

/// Generator for item `index` of a dataset; independent of how many items exist.
pub(crate) fn item_rng(seed: u64, index: u64, part: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, &[Purpose::Generate as u64, index, part]))
}
