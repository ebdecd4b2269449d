use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, Vocab, WorldSpec};
use crate::error::{Error, Result};
use crate::policy::GrammarPrior;
use crate::verify::{FixtureVerifier, NeutralVerifier, OracleVerifier, VerifierBackend};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Reinforce,
    Ppo,
    Grpo,
    Fspo,
    ReinforcePp,
    FspoReinforcePp,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Reinforce => "reinforce",
            Algorithm::Ppo => "ppo",
            Algorithm::Grpo => "grpo",
            Algorithm::Fspo => "fspo",
            Algorithm::ReinforcePp => "reinforce_pp",
            Algorithm::FspoReinforcePp => "fspo_reinforce_pp",
        }
    }

    /// Whether token advantages receive the factuality sign adjustment.
    pub fn adjusts_tokens(self) -> bool {
        matches!(self, Algorithm::Fspo | Algorithm::FspoReinforcePp)
    }

    pub fn batch_normalized(self) -> bool {
        matches!(self, Algorithm::ReinforcePp | Algorithm::FspoReinforcePp)
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    AnswerOnly,
    AnswerPlusFactuality,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum VerifierConfig {
    Oracle,
    Neutral,
    Fixture(PathBuf),
}

impl VerifierConfig {
    /// Relative fixture paths resolve against `base`.
    pub fn build(&self, vocab: &Vocab, base: Option<&Path>) -> Result<Box<dyn VerifierBackend>> {
        Ok(match self {
            VerifierConfig::Oracle => Box::new(OracleVerifier::new(vocab.clone())),
            VerifierConfig::Neutral => Box::new(NeutralVerifier),
            VerifierConfig::Fixture(p) => Box::new(FixtureVerifier::load(resolve(base, p))?),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Generate(WorldSpec),
    Path(PathBuf),
}

impl DatasetSource {
    /// Relative paths resolve against `base` (the config file's directory).
    pub fn load(&self, base: Option<&Path>) -> Result<Dataset> {
        match self {
            DatasetSource::Generate(spec) => Dataset::generate(spec),
            DatasetSource::Path(p) => Dataset::load(resolve(base, p)),
        }
    }
}

pub(crate) fn resolve(base: Option<&Path>, p: &Path) -> PathBuf {
    match base {
        Some(b) if p.is_relative() => b.join(p),
        _ => p.to_path_buf(),
    }
}

/// Every knob of a training run. Unknown keys are rejected when parsing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub group_size: usize,
    pub batch_size: usize,
    pub clip_eps: f64,
    pub kl_coef: f64,
    pub learning_rate: f64,
    pub max_len: usize,
    pub iterations: usize,
    pub seed: u64,
    pub algorithm: Algorithm,
    pub reward_mode: RewardMode,
    pub context_order: usize,
    pub temperature: f64,
    pub verifier: VerifierConfig,
    pub dataset: DatasetSource,
    pub prior: GrammarPrior,
    /// Write a checkpoint every N iterations; 0 keeps only the final one.
    pub checkpoint_every: usize,
    pub dump_rollouts: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            batch_size: 8,
            clip_eps: 0.2,
            kl_coef: 1e-3,
            learning_rate: 0.1,
            max_len: 24,
            iterations: 200,
            seed: 42,
            algorithm: Algorithm::Fspo,
            reward_mode: RewardMode::AnswerPlusFactuality,
            context_order: 2,
            temperature: 1.0,
            verifier: VerifierConfig::Oracle,
            dataset: DatasetSource::Generate(WorldSpec::two_hop_default()),
            prior: GrammarPrior::default(),
            checkpoint_every: 0,
            dump_rollouts: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return bad(format!("clip_eps={} must lie in (0, 1)", self.clip_eps));
        }
        if !(self.kl_coef >= 0.0 && self.kl_coef.is_finite()) {
            return bad(format!("kl_coef={} must be >= 0", self.kl_coef));
        }
        if self.group_size < 2 {
            return bad(format!("group_size={} must be >= 2", self.group_size));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate={} must be positive", self.learning_rate));
        }
        if self.max_len == 0 {
            return bad("max_len must be >= 1".into());
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return bad(format!("temperature={} must be positive", self.temperature));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&crate::error::read_text(path)?)
    }

    pub fn reward_for(&self, answer: f64, factuality_mean: f64) -> f64 {
        match self.reward_mode {
            RewardMode::AnswerOnly => answer,
            RewardMode::AnswerPlusFactuality => answer + factuality_mean,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_documented_values() {
        let c = TrainConfig::default();
        assert_eq!((c.group_size, c.batch_size, c.max_len), (8, 8, 24));
        assert_eq!((c.clip_eps, c.kl_coef, c.learning_rate, c.temperature), (0.2, 1e-3, 0.1, 1.0));
        c.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(TrainConfig::from_json(r#"{"group_size": 4, "bogus": 1}"#), Err(Error::Config(_))));
        let c = TrainConfig::from_json(r#"{"algorithm": "fspo_reinforce_pp", "verifier": {"fixture": "f.jsonl"}}"#).unwrap();
        assert_eq!(c.algorithm, Algorithm::FspoReinforcePp);
        assert_eq!(c.verifier, VerifierConfig::Fixture("f.jsonl".into()));
    }

    #[test]
    fn invalid_values_are_rejected() {
        for bad in [r#"{"clip_eps": 1.0}"#, r#"{"kl_coef": -1}"#, r#"{"group_size": 1}"#, r#"{"learning_rate": 0}"#] {
            assert!(matches!(TrainConfig::from_json(bad), Err(Error::Config(_))), "{bad}");
        }
    }
}
