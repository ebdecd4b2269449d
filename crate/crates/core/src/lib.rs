//! Tabular policy-gradient laboratory: a synthetic multi-hop QA corpus, a
//! softmax token policy, step verifiers, and clipped policy-gradient trainers
//! with and without per-step factuality adjustment.

pub mod advantage;
pub mod corpus;
pub mod error;
pub mod harness;
pub mod optim;
pub mod policy;
pub mod reward;
pub mod theorylab;
pub mod verify;

pub use advantage::{adjust, adjust_token_advantages, batch_advantages, group_advantages, GroupAdvantages};
pub use corpus::{Dataset, Fact, FactWorld, InstanceId, QaInstance, Token, Vocab, WorldSpec};
pub use error::{Error, Result};
pub use harness::{AblationReport, EvalReport, MetricsRow, RunSummary};
pub use optim::{Algorithm, RewardMode, TrainConfig, Trainer, UpdateStats, VerifierConfig};
pub use policy::{GradVector, GrammarPrior, PolicyParams, StateIndex, TokenDist};
pub use reward::RewardBreakdown;
pub use theorylab::fixtures::{BanditFixture, StuckFixture};
pub use verify::{Rollout, StepLabel, VerifierBackend};
