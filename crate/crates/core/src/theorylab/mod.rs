//! Exact-enumeration and Monte-Carlo oracles for small policies: expected
//! returns, exact gradients, estimator variance, stationarity of stuck
//! policies, the entropy floor, hitting times and gradient checks.

mod entropy;
pub mod fixtures;
mod report;

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{QaInstance, Token, EOS};
use crate::error::{contract, Error, Result};
use crate::policy::{sample_rollout, GradVector, PolicyParams, StateIndex};
use crate::reward::{answer_reward, RewardBreakdown};
use crate::verify::{label_rollout, segment, Rollout, StepLabel, VerifierBackend};

pub use entropy::{
    constrained_entropy_min_candidate, entropy_floor, entropy_of, grid_min_entropy, sample_constrained, satisfies_floor_constraint,
    GridSearch,
};
pub use report::{EntropyReport, EscapeReport, GradcheckReport, HittingReport, StationarityReport, TextReport, VarianceReport};

/// Largest output count exact enumeration will accept.
pub const ENUMERATION_LIMIT: u128 = 1_000_000;

/// Sequence-level reward used by the oracles.
pub type RewardFn<'a> = dyn Fn(&Rollout) -> Result<f64> + Sync + 'a;

/// Binary reward: 1 iff the first emitted token is `correct`.
pub fn bandit_reward(correct: Token) -> impl Fn(&Rollout) -> Result<f64> + Sync {
    move |r: &Rollout| Ok(if r.tokens.first() == Some(&correct) { 1.0 } else { 0.0 })
}

pub fn answer_reward_fn(instance: &QaInstance) -> impl Fn(&Rollout) -> Result<f64> + Sync + '_ {
    move |r: &Rollout| Ok(answer_reward(r, instance))
}

pub fn final_reward_fn<'a>(instance: &'a QaInstance, backend: &'a dyn VerifierBackend) -> impl Fn(&Rollout) -> Result<f64> + Sync + 'a {
    move |r: &Rollout| {
        let labels = label_rollout(r, instance, backend)?;
        Ok(RewardBreakdown::new(answer_reward(r, instance), labels).final_reward)
    }
}

/// One complete output with its exact probability.
#[derive(Debug, Clone, PartialEq)]
pub struct Output {
    pub rollout: Rollout,
    pub prob: f64,
}

impl Output {
    /// `sum_t grad log pi(o_t | s_t)`.
    pub fn score(&self, policy: &PolicyParams) -> Result<GradVector> {
        let mut g = GradVector::default();
        for (&s, &t) in self.rollout.states.iter().zip(&self.rollout.tokens) {
            policy.accumulate_grad_logprob(&mut g, s, t, 1.0)?;
        }
        Ok(g)
    }
}

/// Exact number of positive-probability outputs of length at most `max_len`.
/// Stops counting once `limit` is exceeded.
pub fn count_outputs(policy: &PolicyParams, instance: &QaInstance, max_len: usize, limit: u128) -> Result<u128> {
    if max_len == 0 {
        return Err(contract("max_len must be at least 1"));
    }
    let mut frontier: BTreeMap<Vec<Token>, u128> = BTreeMap::new();
    frontier.insert(policy.initial_window(), 1);
    let mut total: u128 = 0;
    for t in 0..max_len {
        let mut next: BTreeMap<Vec<Token>, u128> = BTreeMap::new();
        for (window, c) in frontier {
            let dist = policy.dist(policy.state(instance.id, &window)?, None)?;
            for (tok, &p) in dist.0.iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                if tok as Token == EOS || t + 1 == max_len {
                    total = total.saturating_add(c);
                } else {
                    let n = next.entry(w_key(&window, tok)).or_default();
                    *n = n.saturating_add(c);
                }
            }
        }
        // Every pending prefix completes to at least one output.
        let pending = next.values().fold(0u128, |a, &b| a.saturating_add(b));
        if total.saturating_add(pending) > limit {
            return Ok(total.saturating_add(pending));
        }
        frontier = next;
    }
    Ok(total)
}

fn w_key(window: &[Token], tok: usize) -> Vec<Token> {
    let mut w = window.to_vec();
    w.rotate_left(1);
    *w.last_mut().unwrap() = tok as Token;
    w
}

/// Every output that terminates with EOS or is truncated at `max_len`, with
/// its exact probability. Refuses when the output count exceeds
/// [`ENUMERATION_LIMIT`].
pub fn enumerate_outputs(policy: &PolicyParams, instance: &QaInstance, max_len: usize) -> Result<Vec<Output>> {
    let n = count_outputs(policy, instance, max_len, ENUMERATION_LIMIT)?;
    if n > ENUMERATION_LIMIT {
        return Err(Error::Guard { estimate: n, limit: ENUMERATION_LIMIT });
    }
    let mut out = Vec::with_capacity(n as usize);
    let mut prefix = Vec::new();
    let mut logprobs = Vec::new();
    let mut states = Vec::new();
    walk(policy, instance, max_len, policy.initial_window(), &mut prefix, &mut logprobs, &mut states, &mut out)?;
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn walk(
    policy: &PolicyParams,
    instance: &QaInstance,
    max_len: usize,
    window: Vec<Token>,
    tokens: &mut Vec<Token>,
    logprobs: &mut Vec<f64>,
    states: &mut Vec<StateIndex>,
    out: &mut Vec<Output>,
) -> Result<()> {
    let state = policy.state(instance.id, &window)?;
    let dist = policy.dist(state, None)?;
    for (tok, &p) in dist.0.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        let tok = tok as Token;
        tokens.push(tok);
        logprobs.push(p.ln());
        states.push(state);
        if tok == EOS || tokens.len() == max_len {
            let (steps, answer) = segment(tokens);
            let rollout = Rollout {
                instance_id: instance.id,
                tokens: tokens.clone(),
                old_logprobs: logprobs.clone(),
                states: states.clone(),
                truncated: tok != EOS,
                steps,
                answer,
            };
            let prob = logprobs.iter().sum::<f64>().exp();
            out.push(Output { rollout, prob });
        } else {
            walk(policy, instance, max_len, w_key(&window, tok as usize), tokens, logprobs, states, out)?;
        }
        tokens.pop();
        logprobs.pop();
        states.pop();
    }
    Ok(())
}

/// `J = sum_y R(y) pi(y)`.
pub fn exact_return(policy: &PolicyParams, instance: &QaInstance, max_len: usize, reward: &RewardFn) -> Result<f64> {
    let outputs = enumerate_outputs(policy, instance, max_len)?;
    outputs.iter().map(|o| Ok(reward(&o.rollout)? * o.prob)).sum()
}

/// `grad J = sum_y R(y) pi(y) grad log pi(y)`.
pub fn exact_gradient(policy: &PolicyParams, instance: &QaInstance, max_len: usize, reward: &RewardFn) -> Result<GradVector> {
    let outputs = enumerate_outputs(policy, instance, max_len)?;
    gradient_over(policy, &outputs, reward)
}

fn gradient_over(policy: &PolicyParams, outputs: &[Output], reward: &RewardFn) -> Result<GradVector> {
    let mut g = GradVector::default();
    for o in outputs {
        let r = reward(&o.rollout)?;
        if r != 0.0 {
            g.axpy(r * o.prob, &o.score(policy)?);
        }
    }
    Ok(g)
}

/// Trace of the covariance of the single-sample estimator `R(y) grad log pi(y)`:
/// `sum_y pi(y) R(y)^2 |grad log pi(y)|^2 - |grad J|^2`.
pub fn estimator_variance(policy: &PolicyParams, instance: &QaInstance, max_len: usize, reward: &RewardFn) -> Result<f64> {
    let outputs = enumerate_outputs(policy, instance, max_len)?;
    let mut second = 0.0;
    let mut g = GradVector::default();
    for o in &outputs {
        let r = reward(&o.rollout)?;
        if r != 0.0 {
            let s = o.score(policy)?;
            second += o.prob * r * r * s.norm_sq();
            g.axpy(r * o.prob, &s);
        }
    }
    Ok(second - g.norm_sq())
}

/// Per-output table entry of an [`EnumerationReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputRow {
    pub tokens: Vec<Token>,
    pub prob: f64,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnumerationReport {
    pub n_outputs: usize,
    pub total_mass: f64,
    pub exact_return: f64,
    pub gradient_norm: f64,
    pub variance_trace: f64,
    pub outputs: Vec<OutputRow>,
}

pub fn enumeration_report(policy: &PolicyParams, instance: &QaInstance, max_len: usize, reward: &RewardFn) -> Result<EnumerationReport> {
    let outputs = enumerate_outputs(policy, instance, max_len)?;
    let mut rows = Vec::with_capacity(outputs.len());
    let mut j = 0.0;
    let mut second = 0.0;
    let mut g = GradVector::default();
    for o in &outputs {
        let r = reward(&o.rollout)?;
        j += r * o.prob;
        if r != 0.0 {
            let s = o.score(policy)?;
            second += o.prob * r * r * s.norm_sq();
            g.axpy(r * o.prob, &s);
        }
        rows.push(OutputRow { tokens: o.rollout.tokens.clone(), prob: o.prob, reward: r });
    }
    Ok(EnumerationReport {
        n_outputs: outputs.len(),
        total_mass: outputs.iter().map(|o| o.prob).sum(),
        exact_return: j,
        gradient_norm: g.norm(),
        variance_trace: second - g.norm_sq(),
        outputs: rows,
    })
}

/// Monte-Carlo estimate of the estimator's covariance trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McVariance {
    pub n: usize,
    pub variance: f64,
    pub std_error: f64,
}

fn split_seeds(seed: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.next_u64()).collect()
}

/// Maps `f` over `items` on all available cores, preserving order.
fn par_map<T: Sync, U: Send>(items: &[T], f: impl Fn(&T) -> Result<U> + Sync) -> Result<Vec<U>> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(items.len().max(1));
    let chunk = items.len().div_ceil(workers).max(1);
    let parts: Vec<Result<Vec<U>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = items.chunks(chunk).map(|c| scope.spawn(|| c.iter().map(&f).collect())).collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Sample covariance trace of `n` REINFORCE gradients `R(y) sum_t grad log pi`,
/// with the delta-method standard error.
pub fn monte_carlo_variance(
    policy: &PolicyParams,
    instance: &QaInstance,
    max_len: usize,
    reward: &RewardFn,
    n: usize,
    seed: u64,
) -> Result<McVariance> {
    if n < 2 {
        return Err(contract("monte-carlo variance needs at least 2 samples"));
    }
    let grads = par_map(&split_seeds(seed, n), |&s| {
        let ro = sample_rollout(policy, instance, max_len, s)?;
        let r = reward(&ro)?;
        let mut g = GradVector::default();
        if r != 0.0 {
            for (&st, &t) in ro.states.iter().zip(&ro.tokens) {
                policy.accumulate_grad_logprob(&mut g, st, t, r)?;
            }
        }
        Ok(g)
    })?;
    let mut mean = GradVector::default();
    for g in &grads {
        mean.axpy(1.0 / n as f64, g);
    }
    let q: Vec<f64> = grads
        .iter()
        .map(|g| {
            let mut d = g.clone();
            d.axpy(-1.0, &mean);
            d.norm_sq()
        })
        .collect();
    let qbar = q.iter().sum::<f64>() / n as f64;
    let var_q = q.iter().map(|x| (x - qbar).powi(2)).sum::<f64>() / (n - 1) as f64;
    Ok(McVariance { n, variance: qbar * n as f64 / (n - 1) as f64, std_error: (var_q / n as f64).sqrt() })
}

/// Exact gradient norms under the answer-only and composite rewards.
fn reward_gradients(
    policy: &PolicyParams,
    instance: &QaInstance,
    max_len: usize,
    backend: &dyn VerifierBackend,
) -> Result<(Vec<Output>, GradVector, GradVector)> {
    let outputs = enumerate_outputs(policy, instance, max_len)?;
    let g_answer = gradient_over(policy, &outputs, &answer_reward_fn(instance))?;
    let g_final = gradient_over(policy, &outputs, &final_reward_fn(instance, backend))?;
    Ok((outputs, g_answer, g_final))
}

/// Certifies that a policy with zero mass on the gold answer is stationary
/// under the answer reward, and whether the composite reward still moves it.
pub fn stationarity_check(
    policy: &PolicyParams,
    instance: &QaInstance,
    max_len: usize,
    backend: &dyn VerifierBackend,
) -> Result<StationarityReport> {
    let (outputs, g_answer, g_final) = reward_gradients(policy, instance, max_len, backend)?;
    let gold_mass: f64 = outputs.iter().filter(|o| answer_reward(&o.rollout, instance) == 1.0).fold(0.0, |acc, o| acc + o.prob);
    if gold_mass != 0.0 {
        return Err(contract(format!("policy places mass {gold_mass:e} on the gold answer; mask it to certify stationarity")));
    }
    let mut non_neutral = false;
    for o in &outputs {
        if label_rollout(&o.rollout, instance, backend)?.iter().any(|&l| l != StepLabel::Neutral) {
            non_neutral = true;
        }
    }
    Ok(StationarityReport {
        n_outputs: outputs.len(),
        gold_mass,
        answer_gradient_norm: g_answer.norm(),
        final_gradient_norm: g_final.norm(),
        non_neutral_support: non_neutral,
        stationary_under_answer: g_answer.norm() == 0.0,
    })
}

/// Ratio of composite-reward to answer-reward gradient norms for a policy
/// that still reaches the gold answer with small probability.
pub fn escape_ratio(policy: &PolicyParams, instance: &QaInstance, max_len: usize, backend: &dyn VerifierBackend) -> Result<EscapeReport> {
    let (outputs, g_answer, g_final) = reward_gradients(policy, instance, max_len, backend)?;
    let gold_mass = outputs.iter().filter(|o| answer_reward(&o.rollout, instance) == 1.0).fold(0.0, |acc, o| acc + o.prob);
    let (a, f) = (g_answer.norm(), g_final.norm());
    Ok(EscapeReport { gold_mass, answer_gradient_norm: a, final_gradient_norm: f, ratio: if a > 0.0 { Some(f / a) } else { None } })
}

/// Mean index (1-based) of the first sample with reward 1, over independent
/// trials. Trials that reach `cap` samples without success count as `cap`.
pub fn hitting_time_experiment(
    policy: &PolicyParams,
    instance: &QaInstance,
    max_len: usize,
    reward: &RewardFn,
    trials: usize,
    seed: u64,
    cap: usize,
) -> Result<HittingReport> {
    if trials == 0 || cap == 0 {
        return Err(contract("hitting-time experiment needs trials >= 1 and cap >= 1"));
    }
    let hits = par_map(&split_seeds(seed, trials), |&s| {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        for i in 1..=cap {
            let ro = sample_rollout(policy, instance, max_len, rng.random())?;
            if reward(&ro)? == 1.0 {
                return Ok((i, false));
            }
        }
        Ok((cap, true))
    })?;
    let xs: Vec<f64> = hits.iter().map(|&(i, _)| i as f64).collect();
    let mean = xs.iter().sum::<f64>() / trials as f64;
    let var = if trials > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (trials - 1) as f64 } else { 0.0 };
    let success = exact_return(policy, instance, max_len, reward).ok();
    Ok(HittingReport {
        trials,
        cap,
        capped: hits.iter().filter(|h| h.1).count(),
        mean,
        std_error: (var / trials as f64).sqrt(),
        success_probability: success,
        expected: success.filter(|&p| p > 0.0).map(|p| 1.0 / p),
    })
}

/// Central-difference check of [`exact_gradient`] on every unmasked logit of
/// every state the policy can visit. Relative error is
/// `|a - n| / max(|a|, |n|, 1)`.
pub fn gradcheck(policy: &PolicyParams, instance: &QaInstance, max_len: usize, reward: &RewardFn, h: f64) -> Result<GradcheckReport> {
    if h.is_nan() || h <= 0.0 {
        return Err(contract("step h must be positive"));
    }
    let outputs = enumerate_outputs(policy, instance, max_len)?;
    let analytic = gradient_over(policy, &outputs, reward)?;
    let visited: BTreeSet<StateIndex> = outputs.iter().flat_map(|o| o.rollout.states.iter().copied()).collect();
    let mut max_rel: f64 = 0.0;
    let mut worst = None;
    let mut n = 0;
    for &s in &visited {
        let row = policy.row(s)?.clone();
        for (v, x) in row.iter().enumerate() {
            let Some(x) = *x else { continue };
            let mut plus = policy.clone();
            let mut minus = policy.clone();
            plus.set_logit(s, v as Token, Some(x + h))?;
            minus.set_logit(s, v as Token, Some(x - h))?;
            let numeric = (exact_return(&plus, instance, max_len, reward)? - exact_return(&minus, instance, max_len, reward)?) / (2.0 * h);
            let a = analytic.entry(s, v as Token);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            n += 1;
            if rel > max_rel || worst.is_none() {
                max_rel = max_rel.max(rel);
                worst = Some((s.0, v as Token));
            }
        }
    }
    Ok(GradcheckReport { h, n_checked: n, max_rel_error: max_rel, worst_state: worst.map(|w| w.0), worst_token: worst.map(|w| w.1) })
}

/// Exact variance, the single-answer closed form when it applies, and
/// optionally a Monte-Carlo estimate with `(n, seed)`.
pub fn variance_report(
    policy: &PolicyParams,
    instance: &QaInstance,
    max_len: usize,
    reward: &RewardFn,
    monte_carlo: Option<(usize, u64)>,
) -> Result<VarianceReport> {
    let outputs = enumerate_outputs(policy, instance, max_len)?;
    let mut second = 0.0;
    let mut g = GradVector::default();
    let mut rewarded = Vec::new();
    for o in &outputs {
        let r = reward(&o.rollout)?;
        if r != 0.0 {
            let s = o.score(policy)?;
            second += o.prob * r * r * s.norm_sq();
            g.axpy(r * o.prob, &s);
            rewarded.push((o, r, s));
        }
    }
    let exact = second - g.norm_sq();
    let single = match rewarded.as_slice() {
        [(o, r, s)] if *r == 1.0 => Some(o.prob * (1.0 - o.prob) * s.norm_sq()),
        _ => None,
    };
    let mc = monte_carlo.map(|(n, seed)| monte_carlo_variance(policy, instance, max_len, reward, n, seed)).transpose()?;
    Ok(VarianceReport {
        n_outputs: outputs.len(),
        n_rewarded_outputs: rewarded.len(),
        correct_probability: rewarded.iter().map(|(o, _, _)| o.prob).sum(),
        exact_variance: exact,
        single_answer_formula: single,
        relative_error: single.map(|f| (f - exact).abs() / f.abs().max(exact.abs()).max(f64::MIN_POSITIVE)),
        mc_within_3_std_errors: mc.map(|m| (m.variance - exact).abs() <= 3.0 * m.std_error),
        monte_carlo: mc,
    })
}

/// Closed-form floor checked against a lattice search and random draws from
/// the constraint set.
pub fn entropy_report(eps: f64, k: usize, v: usize, denominator: usize, n_samples: usize, seed: u64) -> Result<EntropyReport> {
    let floor = entropy_floor(eps, k, v)?;
    let grid = grid_min_entropy(eps, k, v, denominator)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut min_h = f64::INFINITY;
    let mut violations = 0;
    for _ in 0..n_samples {
        let h = entropy_of(&sample_constrained(eps, k, v, &mut rng)?);
        min_h = min_h.min(h);
        if h < floor - 1e-12 {
            violations += 1;
        }
    }
    Ok(EntropyReport {
        eps,
        k,
        v,
        floor,
        floor_source: "closed form constructed by this tool: eps on each designated output, residual on one other output".into(),
        grid_denominator: denominator,
        grid_points: grid.n_points,
        grid_min: grid.min_entropy,
        grid_gap: (grid.min_entropy - floor).abs(),
        n_samples,
        min_sampled_entropy: min_h,
        violations,
    })
}
