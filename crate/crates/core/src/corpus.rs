//! Synthetic multi-hop fact worlds and QA instances.
//!
//! Every relation is functional, so a claim `(e, r, x)` is decidable against
//! any evidence set: it is entailed when the triple is present and
//! contradicted when the evidence maps `(e, r)` to a different object.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::optim::Algorithm;

pub type Token = u32;
pub type InstanceId = u64;

pub const BOS: Token = 0;
pub const PERIOD: Token = 1;
pub const ANSWER_MARK: Token = 2;
pub const EOS: Token = 3;
const N_SPECIAL: u32 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Bos,
    Period,
    AnswerMark,
    Eos,
    Entity,
    Relation,
    Filler,
}

/// Token layout: four special ids, then contiguous entity, relation and
/// filler ranges.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Vocab {
    pub n_entities: u32,
    pub n_relations: u32,
    pub n_fillers: u32,
}

impl Vocab {
    pub fn new(n_entities: u32, n_relations: u32, n_fillers: u32) -> Self {
        Self { n_entities, n_relations, n_fillers }
    }

    pub fn size(&self) -> usize {
        (N_SPECIAL + self.n_entities + self.n_relations + self.n_fillers) as usize
    }

    pub fn entities(&self) -> std::ops::Range<Token> {
        N_SPECIAL..N_SPECIAL + self.n_entities
    }

    pub fn relations(&self) -> std::ops::Range<Token> {
        let start = self.entities().end;
        start..start + self.n_relations
    }

    pub fn fillers(&self) -> std::ops::Range<Token> {
        let start = self.relations().end;
        start..start + self.n_fillers
    }

    pub fn entity(&self, i: u32) -> Token {
        N_SPECIAL + i
    }

    pub fn relation(&self, i: u32) -> Token {
        self.entities().end + i
    }

    pub fn filler(&self, i: u32) -> Token {
        self.relations().end + i
    }

    pub fn kind(&self, token: Token) -> Option<TokenKind> {
        Some(match token {
            BOS => TokenKind::Bos,
            PERIOD => TokenKind::Period,
            ANSWER_MARK => TokenKind::AnswerMark,
            EOS => TokenKind::Eos,
            t if self.entities().contains(&t) => TokenKind::Entity,
            t if self.relations().contains(&t) => TokenKind::Relation,
            t if self.fillers().contains(&t) => TokenKind::Filler,
            _ => return None,
        })
    }

    pub fn is_entity(&self, token: Token) -> bool {
        self.entities().contains(&token)
    }

    pub fn is_relation(&self, token: Token) -> bool {
        self.relations().contains(&token)
    }

    /// Stable content hash, stored in checkpoints to catch vocabulary mismatches.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(format!("vocab:{}:{}:{}", self.n_entities, self.n_relations, self.n_fillers));
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Fact {
    pub subject: Token,
    pub relation: Token,
    pub object: Token,
}

impl Fact {
    pub fn new(subject: Token, relation: Token, object: Token) -> Self {
        Self { subject, relation, object }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactWorld {
    pub entities: Vec<Token>,
    pub relations: Vec<Token>,
    /// Sorted; at most one fact per `(subject, relation)`.
    pub facts: Vec<Fact>,
    pub seed: u64,
}

impl FactWorld {
    pub fn object_of(&self, subject: Token, relation: Token) -> Option<Token> {
        let idx = self.facts.binary_search_by(|f| (f.subject, f.relation).cmp(&(subject, relation))).ok()?;
        Some(self.facts[idx].object)
    }

    /// Every simple chain of `hops` facts. A chain never revisits an entity.
    pub fn chains(&self, hops: usize) -> Vec<Vec<Fact>> {
        let mut by_subject: BTreeMap<Token, Vec<Fact>> = BTreeMap::new();
        for f in &self.facts {
            by_subject.entry(f.subject).or_default().push(*f);
        }
        let mut out = Vec::new();
        let mut path = Vec::with_capacity(hops);
        for &start in &self.entities {
            extend_chains(&by_subject, start, hops, &mut path, &mut out);
        }
        out
    }
}

fn extend_chains(by_subject: &BTreeMap<Token, Vec<Fact>>, at: Token, hops: usize, path: &mut Vec<Fact>, out: &mut Vec<Vec<Fact>>) {
    if path.len() == hops {
        out.push(path.clone());
        return;
    }
    let Some(next) = by_subject.get(&at) else { return };
    for f in next {
        let revisits = f.object == path.first().map_or(at, |p| p.subject) || path.iter().any(|p| p.object == f.object);
        if revisits {
            continue;
        }
        path.push(*f);
        extend_chains(by_subject, f.object, hops, path, out);
        path.pop();
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QaInstance {
    pub id: InstanceId,
    /// `[e0, r1, .., r_hops]`
    pub prompt: Vec<Token>,
    pub gold_answer: Vec<Token>,
    pub evidence: Vec<Fact>,
    pub hops: usize,
    /// Optional per-instance algorithm override for mixed-objective training.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub algorithm: Option<Algorithm>,
}

impl QaInstance {
    /// Follows the prompt's relation chain through the evidence.
    pub fn walk_evidence(&self) -> Option<Token> {
        let (&start, relations) = self.prompt.split_first()?;
        let mut at = start;
        for &r in relations {
            at = self.evidence.iter().find(|f| f.subject == at && f.relation == r).map(|f| f.object)?;
        }
        Some(at)
    }
}

/// Creates a world with `n_facts` functional facts over the standard layout
/// (entities first after the specials, then relations).
pub fn generate_world(seed: u64, n_entities: u32, n_relations: u32, n_facts: usize) -> Result<FactWorld> {
    let pairs = n_entities as usize * n_relations as usize;
    if n_facts > pairs {
        return Err(Error::Config(format!("n_facts={n_facts} exceeds n_entities*n_relations={n_entities}*{n_relations}={pairs}")));
    }
    if n_facts > 0 && n_entities < 2 {
        return Err(Error::Config(format!("n_entities={n_entities} must be at least 2 to place non-reflexive facts")));
    }
    // Filler count does not move entity or relation ids.
    let vocab = Vocab::new(n_entities, n_relations, 0);
    let entities: Vec<Token> = vocab.entities().collect();
    let relations: Vec<Token> = vocab.relations().collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut slots: Vec<(Token, Token)> = entities.iter().flat_map(|&e| relations.iter().map(move |&r| (e, r))).collect();
    slots.shuffle(&mut rng);

    let mut facts: Vec<Fact> = slots[..n_facts]
        .iter()
        .map(|&(e, r)| {
            let mut o = entities[rng.random_range(0..entities.len() - 1)];
            if o >= e {
                o += 1;
            }
            Fact::new(e, r, o)
        })
        .collect();
    facts.sort();
    Ok(FactWorld { entities, relations, facts, seed })
}

/// Samples one `hops`-hop question from the world and attaches the chain plus
/// `n_distractors` unrelated facts as its evidence.
pub fn make_instance(world: &FactWorld, id: InstanceId, hops: usize, n_distractors: usize, seed: u64) -> Result<QaInstance> {
    let chains = world.chains(hops.max(1));
    if hops == 0 || chains.is_empty() {
        return Err(Error::Generation(format!("world (seed {}) has no {hops}-hop chain", world.seed)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chain = chains[rng.random_range(0..chains.len())].clone();
    instance_from_chain(world, id, chain, n_distractors, &mut rng)
}

fn instance_from_chain(
    world: &FactWorld,
    id: InstanceId,
    chain: Vec<Fact>,
    n_distractors: usize,
    rng: &mut ChaCha8Rng,
) -> Result<QaInstance> {
    let mut others: Vec<Fact> = world.facts.iter().filter(|f| !chain.contains(f)).copied().collect();
    if others.len() < n_distractors {
        return Err(Error::Generation(format!("requested {n_distractors} distractors but only {} non-chain facts exist", others.len())));
    }
    others.shuffle(rng);
    let mut prompt = vec![chain[0].subject];
    prompt.extend(chain.iter().map(|f| f.relation));
    let gold = chain.last().expect("non-empty chain").object;
    let hops = chain.len();
    let mut evidence = chain;
    evidence.extend_from_slice(&others[..n_distractors]);
    Ok(QaInstance { id, prompt, gold_answer: vec![gold], evidence, hops, algorithm: None })
}

/// Parameters for a generated dataset, also used as the `generate` form of
/// a training config's dataset source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSpec {
    pub seed: u64,
    pub n_entities: u32,
    pub n_relations: u32,
    pub n_fillers: u32,
    pub n_facts: usize,
    pub n_instances: usize,
    pub hops: usize,
    pub n_distractors: usize,
}

impl WorldSpec {
    /// The shipped two-hop world.
    pub fn two_hop_default() -> Self {
        Self { seed: 42, n_entities: 5, n_relations: 2, n_fillers: 1, n_facts: 9, n_instances: 8, hops: 2, n_distractors: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dataset {
    pub seed: u64,
    pub vocab: Vocab,
    pub world: Option<FactWorld>,
    pub instances: Vec<QaInstance>,
}

impl Dataset {
    pub fn generate(spec: &WorldSpec) -> Result<Self> {
        let vocab = Vocab::new(spec.n_entities, spec.n_relations, spec.n_fillers);
        let world = generate_world(spec.seed, spec.n_entities, spec.n_relations, spec.n_facts)?;
        let mut chains = world.chains(spec.hops.max(1));
        if spec.hops == 0 || chains.is_empty() {
            return Err(Error::Generation(format!("world (seed {}) has no {}-hop chain", spec.seed, spec.hops)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_1a57);
        chains.shuffle(&mut rng);
        // Distinct chains first; repeat them only once the world runs out.
        let instances = (0..spec.n_instances)
            .map(|i| {
                let chain = chains[i % chains.len()].clone();
                instance_from_chain(&world, i as InstanceId, chain, spec.n_distractors, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { seed: spec.seed, vocab, world: Some(world), instances })
    }

    pub fn instance(&self, id: InstanceId) -> Option<&QaInstance> {
        self.instances.iter().find(|i| i.id == id)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = crate::error::read_text(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

/// Surface string to token id mapping for external datasets.
pub type TokenMap = BTreeMap<String, Token>;

pub fn load_token_map(path: impl AsRef<Path>) -> Result<TokenMap> {
    Ok(serde_json::from_str(&crate::error::read_text(path)?)?)
}

#[derive(Debug, Deserialize)]
struct ExternalRecord {
    question: String,
    answer: String,
    evidence: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct SkipReport {
    pub skipped: usize,
    /// `(line number, reason)` for each skipped record.
    pub reasons: Vec<(usize, String)>,
}

/// Reads HotpotQA-style `{"question", "answer", "evidence"}` records.
///
/// Records whose strings cannot be mapped onto the vocabulary, whose answer is
/// longer than one token, or whose evidence is not a `subject relation object`
/// triple are skipped and reported. A line that is not valid JSON fails the
/// whole load.
pub fn load_jsonl(path: impl AsRef<Path>, map: &TokenMap, vocab: &Vocab) -> Result<(Vec<QaInstance>, SkipReport)> {
    let reader = BufReader::new(crate::error::open_file(path)?);
    let mut out = Vec::new();
    let mut report = SkipReport::default();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ExternalRecord = serde_json::from_str(&line).map_err(|e| Error::Parse { line: line_no, msg: e.to_string() })?;
        match map_record(&rec, map, vocab, out.len() as InstanceId) {
            Ok(inst) => out.push(inst),
            Err(reason) => {
                report.skipped += 1;
                report.reasons.push((line_no, reason));
            }
        }
    }
    Ok((out, report))
}

fn map_words(text: &str, map: &TokenMap) -> std::result::Result<Vec<Token>, String> {
    if let Some(&t) = map.get(text.trim()) {
        return Ok(vec![t]);
    }
    text.split_whitespace().map(|w| map.get(w).copied().ok_or_else(|| format!("unmapped surface string {w:?}"))).collect()
}

fn map_record(rec: &ExternalRecord, map: &TokenMap, vocab: &Vocab, id: InstanceId) -> std::result::Result<QaInstance, String> {
    let prompt = map_words(&rec.question, map)?;
    if let Some(&bad) = prompt.iter().find(|&&t| vocab.kind(t).is_none()) {
        return Err(format!("token id {bad} outside vocabulary"));
    }
    let answer = map_words(&rec.answer, map)?;
    if answer.len() != 1 {
        return Err(format!("answer maps to {} tokens; only single-token answers are kept", answer.len()));
    }
    if !vocab.is_entity(answer[0]) {
        return Err(format!("answer token {} is not an entity", answer[0]));
    }
    let mut evidence = Vec::with_capacity(rec.evidence.len());
    let mut seen = BTreeSet::new();
    for snippet in &rec.evidence {
        let toks = map_words(snippet, map)?;
        match toks[..] {
            [s, r, o] if vocab.is_entity(s) && vocab.is_relation(r) && vocab.is_entity(o) => {
                if !seen.insert((s, r)) {
                    return Err(format!("evidence maps ({s}, {r}) twice; relations must be functional"));
                }
                evidence.push(Fact::new(s, r, o));
            }
            _ => return Err(format!("evidence {snippet:?} is not an (entity, relation, entity) triple")),
        }
    }
    let hops = prompt.iter().filter(|&&t| vocab.is_relation(t)).count().max(1);
    Ok(QaInstance { id, prompt, gold_answer: answer, evidence, hops, algorithm: None })
}
