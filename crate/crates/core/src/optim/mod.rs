//! Policy-gradient objectives (REINFORCE, PPO-clip, GRPO, FSPO and the
//! batch-normalized variants) and the training loop.

mod config;
mod objective;
mod trainer;

pub use config::{Algorithm, DatasetSource, RewardMode, TrainConfig, VerifierConfig};
pub use objective::{kl_gradient, reinforce_gradient, surrogate_gradient, surrogate_value, total_kl, LengthNorm};
pub use trainer::{
    compute_advantages, initial_policy, token_advantages_for, train, IterationOutcome, ScoredRollout, TrainOutcome, Trainer, UpdateStats,
};
