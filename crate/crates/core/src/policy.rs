//! Autoregressive tabular softmax policy.
//!
//! A state is an instance id plus the last `k` generated tokens (left padded
//! with BOS). Each state owns one row of logits; a `None` entry excludes the
//! token from the support, so deterministic policies are exact rather than
//! the limit of large finite logits.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{InstanceId, QaInstance, Token, Vocab, ANSWER_MARK, BOS, EOS, PERIOD};
use crate::error::{contract, Error, Result};
use crate::verify::{segment, Rollout};

/// Flat index of `(instance slot, window)`; injective for a given policy shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StateIndex(pub u64);

/// One logit row. `None` marks an excluded token.
pub type LogitRow = Vec<Option<f64>>;

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    vocab: Vocab,
    k: usize,
    temperature: f64,
    instances: Vec<InstanceId>,
    rows: Vec<LogitRow>,
}

/// Token probabilities for one state.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDist(pub Vec<f64>);

impl TokenDist {
    pub fn prob(&self, token: Token) -> f64 {
        self.0.get(token as usize).copied().unwrap_or(0.0)
    }

    pub fn entropy(&self) -> f64 {
        -self.0.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
    }
}

impl PolicyParams {
    /// Builds a full table for `instances`; `init` supplies each state's row
    /// from its instance id and window.
    pub fn new(
        vocab: Vocab,
        instances: &[InstanceId],
        k: usize,
        temperature: f64,
        mut init: impl FnMut(InstanceId, &[Token]) -> LogitRow,
    ) -> Result<Self> {
        if k == 0 || k > 4 {
            return Err(Error::Config(format!("context order k={k} must be in 1..=4")));
        }
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Config(format!("temperature {temperature} must be positive")));
        }
        let mut ids = instances.to_vec();
        ids.sort_unstable();
        ids.dedup();
        let v = vocab.size();
        let per_instance = v.pow(k as u32);
        let mut rows = Vec::with_capacity(ids.len() * per_instance);
        let mut window = vec![BOS; k];
        for &id in &ids {
            for code in 0..per_instance {
                decode_window(code as u64, v, &mut window);
                let row = init(id, &window);
                if row.len() != v {
                    return Err(contract(format!("init row has {} entries, vocab has {v}", row.len())));
                }
                if row.iter().flatten().any(|x| !x.is_finite()) {
                    return Err(contract("init produced a non-finite logit"));
                }
                rows.push(row);
            }
        }
        Ok(Self { vocab, k, temperature, instances: ids, rows })
    }

    /// All-zero logits with nothing masked.
    pub fn uniform(vocab: Vocab, instances: &[InstanceId], k: usize) -> Result<Self> {
        let v = vocab.size();
        Self::new(vocab, instances, k, 1.0, |_, _| vec![Some(0.0); v])
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn set_temperature(&mut self, t: f64) -> Result<()> {
        if !(t > 0.0 && t.is_finite()) {
            return Err(Error::Config(format!("temperature {t} must be positive")));
        }
        self.temperature = t;
        Ok(())
    }

    pub fn instances(&self) -> &[InstanceId] {
        &self.instances
    }

    pub fn n_states(&self) -> usize {
        self.rows.len()
    }

    pub fn initial_window(&self) -> Vec<Token> {
        vec![BOS; self.k]
    }

    pub fn state(&self, instance: InstanceId, window: &[Token]) -> Result<StateIndex> {
        if window.len() != self.k {
            return Err(contract(format!("window length {} != k={}", window.len(), self.k)));
        }
        let slot = self
            .instances
            .binary_search(&instance)
            .map_err(|_| contract(format!("instance {instance} not covered by the policy table")))?;
        let v = self.vocab.size() as u64;
        let mut code = 0u64;
        for &t in window {
            if t as u64 >= v {
                return Err(contract(format!("token {t} outside vocabulary of size {v}")));
            }
            code = code * v + t as u64;
        }
        Ok(StateIndex(slot as u64 * v.pow(self.k as u32) + code))
    }

    pub fn decode(&self, state: StateIndex) -> (InstanceId, Vec<Token>) {
        let v = self.vocab.size();
        let per = v.pow(self.k as u32) as u64;
        let mut window = vec![BOS; self.k];
        decode_window(state.0 % per, v, &mut window);
        (self.instances[(state.0 / per) as usize], window)
    }

    /// Every state of the table, in index order.
    pub fn states(&self) -> impl Iterator<Item = StateIndex> {
        (0..self.rows.len() as u64).map(StateIndex)
    }

    pub fn row(&self, state: StateIndex) -> Result<&LogitRow> {
        self.rows.get(state.0 as usize).ok_or_else(|| contract(format!("state {} outside the table", state.0)))
    }

    pub fn row_mut(&mut self, state: StateIndex) -> Result<&mut LogitRow> {
        self.rows.get_mut(state.0 as usize).ok_or_else(|| contract(format!("state {} outside the table", state.0)))
    }

    pub fn set_logit(&mut self, state: StateIndex, token: Token, logit: Option<f64>) -> Result<()> {
        let row = self.row_mut(state)?;
        let slot = row.get_mut(token as usize).ok_or_else(|| contract(format!("token {token} outside vocabulary")))?;
        *slot = logit;
        Ok(())
    }

    /// Softmax of `logit / temperature` over unmasked tokens, optionally
    /// excluding `mask` as well.
    pub fn dist(&self, state: StateIndex, mask: Option<&[Token]>) -> Result<TokenDist> {
        let row = self.row(state)?;
        let t = self.temperature;
        let excluded = |i: usize| mask.is_some_and(|m| m.contains(&(i as Token)));
        let max = row.iter().enumerate().filter_map(|(i, l)| l.filter(|_| !excluded(i))).fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(contract(format!("every token is masked at state {}", state.0)));
        }
        let mut probs: Vec<f64> = row
            .iter()
            .enumerate()
            .map(|(i, l)| match l {
                Some(x) if !excluded(i) => ((x - max) / t).exp(),
                _ => 0.0,
            })
            .collect();
        let z: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= z);
        Ok(TokenDist(probs))
    }

    pub fn logprob(&self, state: StateIndex, token: Token) -> Result<f64> {
        let row = self.row(state)?;
        match row.get(token as usize) {
            Some(Some(_)) => {}
            Some(None) => return Err(contract(format!("token {token} is masked at state {}", state.0))),
            None => return Err(contract(format!("token {token} outside vocabulary"))),
        }
        let t = self.temperature;
        let scaled: Vec<f64> = row.iter().flatten().map(|x| x / t).collect();
        let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + scaled.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        Ok(row[token as usize].unwrap() / t - lse)
    }

    pub fn entropy(&self, state: StateIndex) -> Result<f64> {
        Ok(self.dist(state, None)?.entropy())
    }

    /// Adds `scale * d log pi(token | state) / d logits` into `grad`.
    pub fn accumulate_grad_logprob(&self, grad: &mut GradVector, state: StateIndex, token: Token, scale: f64) -> Result<()> {
        if self.row(state)?.get(token as usize).copied().flatten().is_none() {
            return Err(contract(format!("token {token} is masked or unknown at state {}", state.0)));
        }
        let dist = self.dist(state, None)?;
        let row = grad.row_mut(state, dist.0.len());
        let s = scale / self.temperature;
        for (v, (g, p)) in row.iter_mut().zip(&dist.0).enumerate() {
            let indicator = if v == token as usize { 1.0 } else { 0.0 };
            *g += s * (indicator - p);
        }
        Ok(())
    }

    /// Score function of one token: `(1{v = token} - pi(v|s)) / T` on the state row.
    pub fn grad_logprob(&self, state: StateIndex, token: Token) -> Result<GradVector> {
        let mut g = GradVector::default();
        self.accumulate_grad_logprob(&mut g, state, token, 1.0)?;
        Ok(g)
    }

    /// In-place ascent step `theta += lr * grad`; masked entries stay masked.
    pub fn apply_update_mut(&mut self, grad: &GradVector, lr: f64) -> Result<()> {
        for (state, g) in grad.iter() {
            let row = self.row_mut(*state)?;
            if g.len() != row.len() {
                return Err(contract("gradient row length does not match vocabulary"));
            }
            for (l, d) in row.iter_mut().zip(g) {
                if let Some(x) = l {
                    *x += lr * d;
                    if !x.is_finite() {
                        return Err(contract(format!("update produced a non-finite logit at state {}", state.0)));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn apply_update(&self, grad: &GradVector, lr: f64) -> Result<Self> {
        let mut next = self.clone();
        next.apply_update_mut(grad, lr)?;
        Ok(next)
    }

    /// Independent copy; later updates to `self` do not reach it.
    pub fn snapshot(&self) -> Self {
        self.clone()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            k: self.k,
            temperature: self.temperature,
            vocab: self.vocab.clone(),
            vocab_hash: self.vocab.hash(),
            instances: self.instances.clone(),
            rows: self.rows.clone(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Load(format!("unsupported checkpoint version {}", ck.version)));
        }
        if ck.vocab_hash != ck.vocab.hash() {
            return Err(Error::Load("checkpoint vocab hash does not match its vocabulary".into()));
        }
        let v = ck.vocab.size();
        let expected = ck.instances.len() * v.pow(ck.k as u32);
        if ck.rows.len() != expected || ck.rows.iter().any(|r| r.len() != v) {
            return Err(Error::Load(format!("checkpoint table shape mismatch: expected {expected} rows of {v}")));
        }
        let mut it = ck.rows.into_iter();
        let mut p = Self::new(ck.vocab, &ck.instances, ck.k, ck.temperature, |_, _| it.next().unwrap())?;
        if p.instances != ck.instances {
            return Err(Error::Load("checkpoint instance ids must be sorted and unique".into()));
        }
        p.temperature = ck.temperature;
        Ok(p)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string(&self.to_checkpoint())? + "\n")?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(serde_json::from_str(&crate::error::read_text(path)?)?)
    }
}

fn decode_window(mut code: u64, v: usize, window: &mut [Token]) {
    for slot in window.iter_mut().rev() {
        *slot = (code % v as u64) as Token;
        code /= v as u64;
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// On-disk policy: the dense logit table plus its shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub k: usize,
    pub temperature: f64,
    pub vocab: Vocab,
    pub vocab_hash: String,
    pub instances: Vec<InstanceId>,
    pub rows: Vec<LogitRow>,
}

/// Sparse gradient over logit rows. Absent rows are zero.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradVector {
    rows: BTreeMap<StateIndex, Vec<f64>>,
}

impl GradVector {
    pub fn row_mut(&mut self, state: StateIndex, width: usize) -> &mut Vec<f64> {
        self.rows.entry(state).or_insert_with(|| vec![0.0; width])
    }

    pub fn get(&self, state: StateIndex) -> Option<&[f64]> {
        self.rows.get(&state).map(Vec::as_slice)
    }

    pub fn entry(&self, state: StateIndex, token: Token) -> f64 {
        self.get(state).and_then(|r| r.get(token as usize)).copied().unwrap_or(0.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&StateIndex, &Vec<f64>)> {
        self.rows.iter()
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &GradVector) {
        for (s, r) in &other.rows {
            let dst = self.row_mut(*s, r.len());
            for (d, x) in dst.iter_mut().zip(r) {
                *d += alpha * x;
            }
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        self.rows.values_mut().flatten().for_each(|x| *x *= alpha);
    }

    pub fn dot(&self, other: &GradVector) -> f64 {
        self.rows.iter().filter_map(|(s, r)| other.rows.get(s).map(|o| r.iter().zip(o).map(|(a, b)| a * b).sum::<f64>())).sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.rows.values().flatten().fold(0.0, |acc, x| acc + x * x)
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }
}

/// `sum p log(p / q)`; requires `q > 0` wherever `p > 0`.
pub fn kl(p: &TokenDist, q: &TokenDist) -> Result<f64> {
    if p.0.len() != q.0.len() {
        return Err(contract("distributions differ in length"));
    }
    let mut total = 0.0;
    for (i, (&a, &b)) in p.0.iter().zip(&q.0).enumerate() {
        if a > 0.0 {
            if b <= 0.0 {
                return Err(contract(format!("kl support violation at token {i}")));
            }
            total += a * (a / b).ln();
        }
    }
    Ok(total.max(0.0))
}

/// Samples one response; generation stops at EOS or after `max_len` tokens and
/// records the per-token log-probability under `params`.
///
/// One uniform draw per token, inverted through the CDF in token-id order, so
/// two policies sampled from the same seed share their random stream.
pub fn sample_rollout(params: &PolicyParams, instance: &QaInstance, max_len: usize, seed: u64) -> Result<Rollout> {
    if max_len == 0 {
        return Err(contract("max_len must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut window = params.initial_window();
    let mut tokens = Vec::with_capacity(max_len);
    let mut logprobs = Vec::with_capacity(max_len);
    let mut states = Vec::with_capacity(max_len);
    while tokens.len() < max_len {
        let state = params.state(instance.id, &window)?;
        let dist = params.dist(state, None)?;
        let u: f64 = rng.random();
        let token = invert_cdf(&dist, u);
        tokens.push(token);
        logprobs.push(dist.0[token as usize].ln());
        states.push(state);
        window.rotate_left(1);
        *window.last_mut().unwrap() = token;
        if token == EOS {
            break;
        }
    }
    let truncated = tokens.last() != Some(&EOS);
    let (steps, answer) = segment(&tokens);
    Ok(Rollout { instance_id: instance.id, tokens, old_logprobs: logprobs, states, truncated, steps, answer })
}

fn invert_cdf(dist: &TokenDist, u: f64) -> Token {
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in dist.0.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i as Token;
            }
        }
    }
    last as Token
}

/// Grammar-shaped initial policy: well-formed claim steps
/// `[entity relation entity PERIOD]`, filler steps `[filler PERIOD]`, and an
/// answer `[ANSWER_MARK entity EOS]`. Tokens the grammar forbids are masked.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GrammarPrior {
    /// Logit of ANSWER_MARK at a step boundary, relative to entity starts at 0.
    pub answer_logit: f64,
    /// Logit of a filler step at a step boundary.
    pub filler_logit: f64,
}

impl Default for GrammarPrior {
    fn default() -> Self {
        Self { answer_logit: 1.5, filler_logit: 0.0 }
    }
}

impl GrammarPrior {
    pub fn row(&self, vocab: &Vocab, window: &[Token]) -> LogitRow {
        use crate::corpus::TokenKind::*;
        let v = vocab.size();
        let mut row = vec![None; v];
        let last = *window.last().expect("k >= 1");
        let prev = if window.len() >= 2 { Some(window[window.len() - 2]) } else { None };
        let prev_kind = prev.and_then(|p| vocab.kind(p));
        let boundary = |row: &mut LogitRow| {
            for e in vocab.entities() {
                row[e as usize] = Some(0.0);
            }
            for f in vocab.fillers() {
                row[f as usize] = Some(self.filler_logit);
            }
            row[ANSWER_MARK as usize] = Some(self.answer_logit);
        };
        match vocab.kind(last) {
            // The all-BOS window only occurs at the first position.
            Some(Bos) if window.iter().all(|&t| t == BOS) => boundary(&mut row),
            Some(Period) => boundary(&mut row),
            Some(Entity) => match prev_kind {
                Some(Relation) => row[PERIOD as usize] = Some(0.0),
                Some(AnswerMark) => row[EOS as usize] = Some(0.0),
                Some(Bos) | Some(Period) | None => {
                    for r in vocab.relations() {
                        row[r as usize] = Some(0.0);
                    }
                }
                _ => {}
            },
            Some(Relation) | Some(AnswerMark) => {
                for e in vocab.entities() {
                    row[e as usize] = Some(0.0);
                }
            }
            Some(Filler) => row[PERIOD as usize] = Some(0.0),
            _ => {}
        }
        row
    }

    pub fn build(&self, vocab: &Vocab, instances: &[InstanceId], k: usize, temperature: f64) -> Result<PolicyParams> {
        if k < 2 {
            return Err(Error::Config("the grammar prior needs context order k >= 2".into()));
        }
        PolicyParams::new(vocab.clone(), instances, k, temperature, |_, w| self.row(vocab, w))
    }
}
