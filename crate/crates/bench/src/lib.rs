//! Shared inputs for the benchmarks.

use fspo_core::corpus::{Dataset, WorldSpec};
use fspo_core::optim::initial_policy;
use fspo_core::policy::PolicyParams;
use fspo_core::TrainConfig;

/// The default two-hop world with its initial policy.
pub fn default_setup() -> (Dataset, PolicyParams, TrainConfig) {
    let ds = Dataset::generate(&WorldSpec::two_hop_default()).expect("default world");
    let cfg = TrainConfig::default();
    let policy = initial_policy(&ds, &cfg).expect("initial policy");
    (ds, policy, cfg)
}
