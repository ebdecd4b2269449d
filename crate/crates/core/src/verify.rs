//! Step segmentation and step-level factuality labels.

use std::collections::HashMap;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::corpus::{Fact, InstanceId, QaInstance, Token, Vocab, ANSWER_MARK, EOS, PERIOD};
use crate::error::{contract, Error, Result};
use crate::policy::StateIndex;

/// Half-open token range `[start, end)`.
pub type Span = (usize, usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub instance_id: InstanceId,
    pub tokens: Vec<Token>,
    /// Log-probability of each token under the sampling policy.
    pub old_logprobs: Vec<f64>,
    /// Policy state each token was sampled from.
    pub states: Vec<StateIndex>,
    pub truncated: bool,
    pub steps: Vec<Span>,
    pub answer: Option<Span>,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn step_tokens(&self, j: usize) -> &[Token] {
        let (a, b) = self.steps[j];
        &self.tokens[a..b]
    }

    pub fn answer_tokens(&self) -> Option<&[Token]> {
        self.answer.map(|(a, b)| &self.tokens[a..b])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StepLabel {
    Contradicted,
    Neutral,
    Entailed,
}

impl StepLabel {
    pub fn value(self) -> i8 {
        match self {
            StepLabel::Contradicted => -1,
            StepLabel::Neutral => 0,
            StepLabel::Entailed => 1,
        }
    }

    pub fn from_value(v: i64) -> Option<Self> {
        match v {
            -1 => Some(StepLabel::Contradicted),
            0 => Some(StepLabel::Neutral),
            1 => Some(StepLabel::Entailed),
            _ => None,
        }
    }
}

impl Serialize for StepLabel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_i8(self.value())
    }
}

impl<'de> Deserialize<'de> for StepLabel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = i64::deserialize(d)?;
        StepLabel::from_value(v).ok_or_else(|| serde::de::Error::custom(format!("step label {v} not in {{-1, 0, 1}}")))
    }
}

/// Splits the region before the first ANSWER_MARK into PERIOD-terminated
/// steps (each PERIOD belongs to the step it closes). The answer span runs
/// from just after ANSWER_MARK to EOS, exclusive.
pub fn segment(tokens: &[Token]) -> (Vec<Span>, Option<Span>) {
    let mark = tokens.iter().position(|&t| t == ANSWER_MARK);
    let end_of_content = tokens.iter().position(|&t| t == EOS).unwrap_or(tokens.len());
    let step_region = mark.unwrap_or(end_of_content).min(end_of_content);
    let mut steps = Vec::new();
    let mut start = 0;
    for (i, &t) in tokens[..step_region].iter().enumerate() {
        if t == PERIOD {
            steps.push((start, i + 1));
            start = i + 1;
        }
    }
    if start < step_region {
        steps.push((start, step_region));
    }
    let answer = mark.filter(|&m| m < end_of_content).map(|m| (m + 1, end_of_content));
    (steps, answer)
}

/// A step-labelling backend.
pub trait VerifierBackend: Send + Sync {
    fn label(&self, step: &[Token], evidence: &[Fact]) -> StepLabel;
    /// Identical inputs always produce identical labels.
    fn is_deterministic(&self) -> bool;
}

/// Exact rule-based entailment over functional evidence.
#[derive(Debug, Clone)]
pub struct OracleVerifier {
    vocab: Vocab,
}

impl OracleVerifier {
    pub fn new(vocab: Vocab) -> Self {
        Self { vocab }
    }
}

/// The claim a step makes, if it is exactly `[entity, relation, entity]`
/// (ignoring one trailing PERIOD).
pub fn claim_of(vocab: &Vocab, step: &[Token]) -> Option<Fact> {
    let body = step.strip_suffix(&[PERIOD]).unwrap_or(step);
    match *body {
        [s, r, o] if vocab.is_entity(s) && vocab.is_relation(r) && vocab.is_entity(o) => Some(Fact::new(s, r, o)),
        _ => None,
    }
}

pub fn oracle_label(vocab: &Vocab, step: &[Token], evidence: &[Fact]) -> StepLabel {
    let Some(claim) = claim_of(vocab, step) else { return StepLabel::Neutral };
    let mut label = StepLabel::Neutral;
    for f in evidence {
        if f.subject == claim.subject && f.relation == claim.relation {
            if f.object == claim.object {
                return StepLabel::Entailed;
            }
            label = StepLabel::Contradicted;
        }
    }
    label
}

impl VerifierBackend for OracleVerifier {
    fn label(&self, step: &[Token], evidence: &[Fact]) -> StepLabel {
        oracle_label(&self.vocab, step, evidence)
    }

    fn is_deterministic(&self) -> bool {
        true
    }
}

/// Labels every step neutral.
#[derive(Debug, Clone, Copy, Default)]
pub struct NeutralVerifier;

impl VerifierBackend for NeutralVerifier {
    fn label(&self, _: &[Token], _: &[Fact]) -> StepLabel {
        StepLabel::Neutral
    }

    fn is_deterministic(&self) -> bool {
        true
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FixtureLine {
    step: Vec<Token>,
    label: StepLabel,
}

/// Replays labels computed elsewhere, keyed by the exact step token sequence
/// (trailing PERIOD included). Unknown steps are neutral and counted.
#[derive(Debug, Default)]
pub struct FixtureVerifier {
    table: HashMap<Vec<Token>, StepLabel>,
    misses: AtomicUsize,
}

impl FixtureVerifier {
    pub fn from_entries(entries: impl IntoIterator<Item = (Vec<Token>, StepLabel)>) -> Result<Self> {
        let mut table = HashMap::new();
        for (step, label) in entries {
            if table.insert(step.clone(), label).is_some() {
                return Err(Error::Load(format!("duplicate fixture step {step:?}")));
            }
        }
        Ok(Self { table, misses: AtomicUsize::new(0) })
    }

    /// Reads JSONL lines `{"step": [ids], "label": -1|0|1}`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let reader = BufReader::new(crate::error::open_file(path)?);
        let mut entries = Vec::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: FixtureLine = serde_json::from_str(&line).map_err(|e| Error::Parse { line: idx + 1, msg: e.to_string() })?;
            entries.push((rec.step, rec.label));
        }
        Self::from_entries(entries)
    }

    pub fn misses(&self) -> usize {
        self.misses.load(Ordering::Relaxed)
    }

    pub fn lookup(&self, step: &[Token]) -> StepLabel {
        match self.table.get(step) {
            Some(&l) => l,
            None => {
                self.misses.fetch_add(1, Ordering::Relaxed);
                StepLabel::Neutral
            }
        }
    }
}

impl VerifierBackend for FixtureVerifier {
    fn label(&self, step: &[Token], _: &[Fact]) -> StepLabel {
        self.lookup(step)
    }

    fn is_deterministic(&self) -> bool {
        true
    }
}

/// One label per step span of `rollout`, judged against the instance's evidence.
pub fn label_rollout(rollout: &Rollout, instance: &QaInstance, backend: &dyn VerifierBackend) -> Result<Vec<StepLabel>> {
    if rollout.instance_id != instance.id {
        return Err(contract(format!("rollout for instance {} labelled against instance {}", rollout.instance_id, instance.id)));
    }
    Ok((0..rollout.steps.len()).map(|j| backend.label(rollout.step_tokens(j), &instance.evidence)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const A: Token = 4;
    const B: Token = 5;
    const C: Token = 6;
    const R: Token = 7;
    const F: Token = 8;

    fn vocab() -> Vocab {
        Vocab::new(3, 1, 1)
    }

    #[test]
    fn segment_examples() {
        let toks = [A, R, B, PERIOD, B, R, C, PERIOD, ANSWER_MARK, C, EOS];
        assert_eq!(segment(&toks), (vec![(0, 4), (4, 8)], Some((9, 10))));
        assert_eq!(segment(&[ANSWER_MARK, C, EOS]), (vec![], Some((1, 2))));
        assert_eq!(segment(&[A, R, B, EOS]), (vec![(0, 3)], None));
        // truncated right after the marker
        assert_eq!(segment(&[A, PERIOD, ANSWER_MARK]), (vec![(0, 2)], Some((3, 3))));
    }

    #[test]
    fn oracle_examples() {
        let v = vocab();
        let ev = [Fact::new(A, R, B)];
        assert_eq!(oracle_label(&v, &[A, R, B, PERIOD], &ev), StepLabel::Entailed);
        assert_eq!(oracle_label(&v, &[A, R, C, PERIOD], &ev), StepLabel::Contradicted);
        assert_eq!(oracle_label(&v, &[F, PERIOD], &ev), StepLabel::Neutral);
        assert_eq!(oracle_label(&v, &[B, R, C, PERIOD], &ev), StepLabel::Neutral);
        assert_eq!(oracle_label(&v, &[A, R, B, B, PERIOD], &ev), StepLabel::Neutral);
    }

    #[test]
    fn fixture_lookup_and_duplicates() {
        let fx = FixtureVerifier::from_entries([(vec![A, R, B, PERIOD], StepLabel::Contradicted)]).unwrap();
        assert_eq!(fx.label(&[A, R, B, PERIOD], &[]), StepLabel::Contradicted);
        assert_eq!(fx.label(&[A, R, C, PERIOD], &[]), StepLabel::Neutral);
        assert_eq!(fx.misses(), 1);

        let mut f = tempfile::NamedTempFile::new().unwrap();
        use std::io::Write;
        writeln!(f, r#"{{"step": [4, 7, 5, 1], "label": -1}}"#).unwrap();
        writeln!(f, r#"{{"step": [4, 7, 5, 1], "label": 1}}"#).unwrap();
        assert!(matches!(FixtureVerifier::load(f.path()), Err(Error::Load(_))));

        let mut g = tempfile::NamedTempFile::new().unwrap();
        writeln!(g, r#"{{"step": [4], "label": 2}}"#).unwrap();
        assert!(matches!(FixtureVerifier::load(g.path()), Err(Error::Parse { line: 1, .. })));
    }

    fn token() -> impl Strategy<Value = Token> {
        prop_oneof![Just(PERIOD), Just(ANSWER_MARK), Just(EOS), 4u32..9]
    }

    proptest! {
        #[test]
        fn segmentation_partitions_tokens(mut toks in proptest::collection::vec(token(), 0..20)) {
            // sampled rollouts end at their first EOS
            if let Some(e) = toks.iter().position(|&t| t == EOS) { toks.truncate(e + 1); }
            let (steps, answer) = segment(&toks);
            let mut rebuilt = Vec::new();
            let mut prev_end = 0;
            for &(a, b) in &steps {
                prop_assert_eq!(a, prev_end);
                prop_assert!(b > a);
                rebuilt.extend_from_slice(&toks[a..b]);
                prev_end = b;
            }
            if let Some((a, b)) = answer {
                prop_assert_eq!(toks[a - 1], ANSWER_MARK);
                prop_assert_eq!(a - 1, prev_end);
                rebuilt.push(ANSWER_MARK);
                rebuilt.extend_from_slice(&toks[a..b]);
                prev_end = b;
            } else if let Some(m) = toks.iter().position(|&t| t == ANSWER_MARK) {
                // a marker after EOS never happens in sampled output
                prop_assert!(toks[..m].contains(&EOS));
            }
            if prev_end < toks.len() {
                prop_assert_eq!(&toks[prev_end..], &[EOS][..]);
                rebuilt.push(EOS);
            }
            prop_assert_eq!(rebuilt, toks);
        }

        #[test]
        fn oracle_is_sound_and_deterministic(
            step in proptest::collection::vec(4u32..9, 1..5),
            ev in proptest::collection::vec((4u32..7, 7u32..8, 4u32..7), 0..4),
        ) {
            let v = vocab();
            let evidence: Vec<Fact> = ev.into_iter().map(|(s, r, o)| Fact::new(s, r, o)).collect();
            let oracle = OracleVerifier::new(v.clone());
            let label = oracle.label(&step, &evidence);
            prop_assert_eq!(label, oracle.label(&step, &evidence));
            match label {
                StepLabel::Entailed => {
                    let c = claim_of(&v, &step).unwrap();
                    prop_assert!(evidence.contains(&c));
                }
                StepLabel::Contradicted => {
                    let c = claim_of(&v, &step).unwrap();
                    prop_assert!(evidence.iter().any(|f| f.subject == c.subject && f.relation == c.relation && f.object != c.object));
                }
                StepLabel::Neutral => {}
            }
        }
    }
}
