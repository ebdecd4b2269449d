//! Small policies and worlds for the theory experiments. The same fixtures
//! ship as JSON under `fixtures/`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, Fact, QaInstance, Token, Vocab, WorldSpec, ANSWER_MARK, BOS, EOS, PERIOD};
use crate::error::{contract, Result};
use crate::policy::{Checkpoint, GrammarPrior, LogitRow, PolicyParams};

/// A one-step bandit: arms are entity tokens, every other token is masked,
/// and the response is a single token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BanditFixture {
    pub instance: QaInstance,
    pub policy: Checkpoint,
    pub correct: Token,
    pub max_len: usize,
}

impl BanditFixture {
    /// Arms get `logits` in order; arm `correct_arm` is the rewarded one.
    pub fn new(logits: &[f64], correct_arm: usize) -> Result<Self> {
        if logits.len() < 2 || correct_arm >= logits.len() {
            return Err(contract("a bandit needs at least two arms and a valid correct arm"));
        }
        let vocab = Vocab::new(logits.len() as u32, 0, 0);
        let correct = vocab.entity(correct_arm as u32);
        let instance = QaInstance { id: 0, prompt: vec![], gold_answer: vec![correct], evidence: vec![], hops: 1, algorithm: None };
        let row: LogitRow = (0..vocab.size() as Token)
            .map(|t| if vocab.is_entity(t) { Some(logits[(t - vocab.entity(0)) as usize]) } else { None })
            .collect();
        let policy = PolicyParams::new(vocab, &[0], 1, 1.0, |_, _| row.clone())?;
        Ok(Self { instance, policy: policy.to_checkpoint(), correct, max_len: 1 })
    }

    /// A two-arm bandit whose rewarded arm has probability exactly `p` up to rounding.
    pub fn with_success_probability(p: f64) -> Result<Self> {
        if !(p > 0.0 && p <= 1.0) {
            return Err(contract(format!("success probability {p} must lie in (0, 1]")));
        }
        if p == 1.0 {
            let mut f = Self::new(&[0.0, 0.0], 0)?;
            let mut policy = f.policy()?;
            let s = policy.state(0, &[BOS])?;
            policy.set_logit(s, f.correct + 1, None)?;
            f.policy = policy.to_checkpoint();
            return Ok(f);
        }
        Self::new(&[p.ln(), (1.0 - p).ln()], 0)
    }

    /// The shipped fixture.
    pub fn shipped() -> Self {
        Self::new(&[0.4, -0.3, 1.1, 0.0], 0).expect("valid bandit")
    }

    pub fn policy(&self) -> Result<PolicyParams> {
        PolicyParams::from_checkpoint(self.policy.clone())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&crate::error::read_text(path)?)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

/// A policy stuck on a wrong answer. Its only stochastic choice is the
/// object of the first claim, one entailed and one contradicted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StuckFixture {
    pub dataset: Dataset,
    /// Answer row masked to the wrong entity.
    pub masked: Checkpoint,
    /// Answer row over all entities, wrong entity ahead by `answer_gap`.
    pub unmasked: Checkpoint,
    pub answer_gap: f64,
    pub max_len: usize,
}

impl StuckFixture {
    pub fn shipped() -> Self {
        Self::build(10.0).expect("valid stuck fixture")
    }

    pub fn build(answer_gap: f64) -> Result<Self> {
        let vocab = Vocab::new(5, 2, 0);
        let [a, b, c, d, w] = [0, 1, 2, 3, 4].map(|i| vocab.entity(i));
        let (r1, r2) = (vocab.relation(0), vocab.relation(1));
        let instance = QaInstance {
            id: 0,
            prompt: vec![a, r1, r2],
            gold_answer: vec![c],
            evidence: vec![Fact::new(a, r1, b), Fact::new(b, r2, c), Fact::new(d, r1, a)],
            hops: 2,
            algorithm: None,
        };
        let dataset = Dataset { seed: 0, vocab: vocab.clone(), world: None, instances: vec![instance] };
        let only = |t: Token| -> LogitRow {
            let mut r = vec![None; vocab.size()];
            r[t as usize] = Some(0.0);
            r
        };
        let prior = GrammarPrior::default();
        let build = |answer_row: LogitRow| {
            PolicyParams::new(vocab.clone(), &[0], 2, 1.0, |_, win| match win {
                [BOS, BOS] => only(a),
                [BOS, x] if *x == a => only(r1),
                [x, y] if *x == a && *y == r1 => {
                    let mut r = vec![None; vocab.size()];
                    r[b as usize] = Some(0.0);
                    r[d as usize] = Some(0.5);
                    r
                }
                [x, PERIOD] if *x == b || *x == d => only(ANSWER_MARK),
                [PERIOD, ANSWER_MARK] => answer_row.clone(),
                [ANSWER_MARK, x] if *x == w => only(EOS),
                _ => prior.row(&vocab, win),
            })
        };
        let masked = build(only(w))?;
        let mut open = vec![None; vocab.size()];
        for e in vocab.entities() {
            open[e as usize] = Some(if e == w { answer_gap } else { 0.0 });
        }
        let unmasked = build(open)?;
        Ok(Self { dataset, masked: masked.to_checkpoint(), unmasked: unmasked.to_checkpoint(), answer_gap, max_len: 24 })
    }

    pub fn instance(&self) -> &QaInstance {
        &self.dataset.instances[0]
    }

    pub fn masked_policy(&self) -> Result<PolicyParams> {
        PolicyParams::from_checkpoint(self.masked.clone())
    }

    pub fn unmasked_policy(&self) -> Result<PolicyParams> {
        PolicyParams::from_checkpoint(self.unmasked.clone())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&crate::error::read_text(path)?)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

/// The shipped two-hop training world.
pub fn shipped_world() -> Dataset {
    Dataset::generate(&WorldSpec::two_hop_default()).expect("default world generates")
}

/// Directory holding the shipped fixture files.
pub fn fixtures_dir() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures"))
}
