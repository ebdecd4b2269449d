//! Surrogate objectives and their gradients with respect to the logit table.

use std::collections::BTreeSet;

use crate::error::{contract, Result};
use crate::policy::{kl, GradVector, PolicyParams, StateIndex};
use crate::verify::Rollout;

/// How a rollout's per-token terms are aggregated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LengthNorm {
    /// `1/|y_i| * sum_t`, as in the group-relative objectives.
    TokenMean,
    /// Plain `sum_t`, as in the PPO surrogate.
    TokenSum,
}

fn rollout_weight(group: usize, len: usize, norm: LengthNorm) -> f64 {
    let g = 1.0 / group as f64;
    match norm {
        LengthNorm::TokenMean => g / len.max(1) as f64,
        LengthNorm::TokenSum => g,
    }
}

fn check_shapes(rollouts: &[Rollout], token_advantages: &[Vec<f64>]) -> Result<()> {
    if rollouts.len() != token_advantages.len() {
        return Err(contract(format!("{} rollouts but {} advantage rows", rollouts.len(), token_advantages.len())));
    }
    for (r, a) in rollouts.iter().zip(token_advantages) {
        if r.len() != a.len() || r.states.len() != r.len() || r.old_logprobs.len() != r.len() {
            return Err(contract("rollout tokens, states, old log-probs and advantages differ in length"));
        }
    }
    Ok(())
}

fn ratio(policy: &PolicyParams, state: StateIndex, token: u32, old_logprob: f64) -> Result<f64> {
    let r = (policy.logprob(state, token)? - old_logprob).exp();
    if !r.is_finite() {
        return Err(contract(format!("non-finite importance ratio at state {} (old log-prob {old_logprob})", state.0)));
    }
    Ok(r)
}

/// Whether the min in the clipped objective picks the constant clipped branch.
fn clipped(ratio: f64, adv: f64, eps: f64) -> bool {
    (adv > 0.0 && ratio > 1.0 + eps) || (adv < 0.0 && ratio < 1.0 - eps)
}

/// Value of `(1/G) sum_i w_i sum_t min(r_t A, clip(r_t, 1-eps, 1+eps) A)` for one group.
pub fn surrogate_value(
    policy: &PolicyParams,
    rollouts: &[Rollout],
    token_advantages: &[Vec<f64>],
    eps: f64,
    norm: LengthNorm,
) -> Result<f64> {
    check_shapes(rollouts, token_advantages)?;
    let mut total = 0.0;
    for (ro, adv) in rollouts.iter().zip(token_advantages) {
        let w = rollout_weight(rollouts.len(), ro.len(), norm);
        for (t, &a) in adv.iter().enumerate() {
            let r = ratio(policy, ro.states[t], ro.tokens[t], ro.old_logprobs[t])?;
            total += w * (r * a).min(r.clamp(1.0 - eps, 1.0 + eps) * a);
        }
    }
    Ok(total)
}

/// Gradient of [`surrogate_value`] for one group. Tokens whose min selects the
/// clipped constant contribute nothing.
pub fn surrogate_gradient(
    policy: &PolicyParams,
    rollouts: &[Rollout],
    token_advantages: &[Vec<f64>],
    eps: f64,
    norm: LengthNorm,
) -> Result<GradVector> {
    check_shapes(rollouts, token_advantages)?;
    let mut grad = GradVector::default();
    for (ro, adv) in rollouts.iter().zip(token_advantages) {
        let w = rollout_weight(rollouts.len(), ro.len(), norm);
        for (t, &a) in adv.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            let r = ratio(policy, ro.states[t], ro.tokens[t], ro.old_logprobs[t])?;
            if clipped(r, a, eps) {
                continue;
            }
            // d(r A)/dtheta = A r grad log pi
            policy.accumulate_grad_logprob(&mut grad, ro.states[t], ro.tokens[t], w * a * r)?;
        }
    }
    Ok(grad)
}

/// Score-function estimate `mean_i R_i sum_t grad log pi(o_t | s_t)`.
pub fn reinforce_gradient(policy: &PolicyParams, rollouts: &[Rollout], rewards: &[f64]) -> Result<GradVector> {
    if rollouts.len() != rewards.len() || rollouts.is_empty() {
        return Err(contract(format!("{} rollouts but {} rewards", rollouts.len(), rewards.len())));
    }
    let scale = 1.0 / rollouts.len() as f64;
    let mut grad = GradVector::default();
    for (ro, &r) in rollouts.iter().zip(rewards) {
        if r == 0.0 {
            continue;
        }
        for (&s, &tok) in ro.states.iter().zip(&ro.tokens) {
            policy.accumulate_grad_logprob(&mut grad, s, tok, scale * r)?;
        }
    }
    Ok(grad)
}

/// Gradient of `sum_s KL(pi(.|s) || ref(.|s))` over `states`, unscaled.
pub fn kl_gradient(policy: &PolicyParams, reference: &PolicyParams, states: &BTreeSet<StateIndex>) -> Result<GradVector> {
    let mut grad = GradVector::default();
    let inv_t = 1.0 / policy.temperature();
    for &s in states {
        let p = policy.dist(s, None)?;
        let q = reference.dist(s, None)?;
        let d = kl(&p, &q)?;
        let row = grad.row_mut(s, p.0.len());
        for (g, (&pv, &qv)) in row.iter_mut().zip(p.0.iter().zip(&q.0)) {
            if pv > 0.0 {
                *g += inv_t * pv * ((pv / qv).ln() - d);
            }
        }
    }
    Ok(grad)
}

pub fn total_kl(policy: &PolicyParams, reference: &PolicyParams, states: &BTreeSet<StateIndex>) -> Result<f64> {
    states.iter().map(|&s| kl(&policy.dist(s, None)?, &reference.dist(s, None)?)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::advantage::group_advantages;
    use crate::corpus::{Dataset, QaInstance, WorldSpec};
    use crate::policy::{sample_rollout, GrammarPrior};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (Dataset, PolicyParams) {
        let ds = Dataset::generate(&WorldSpec::two_hop_default()).unwrap();
        let ids: Vec<_> = ds.instances.iter().map(|i| i.id).collect();
        let p = GrammarPrior::default().build(&ds.vocab, &ids, 2, 1.0).unwrap();
        (ds, p)
    }

    fn group(p: &PolicyParams, inst: &QaInstance, n: usize, seed: u64) -> Vec<Rollout> {
        (0..n).map(|i| sample_rollout(p, inst, 24, seed + i as u64).unwrap()).collect()
    }

    fn random_update(p: &PolicyParams, rollouts: &[Rollout], scale: f64, seed: u64) -> PolicyParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = GradVector::default();
        let v = p.vocab().size();
        for ro in rollouts {
            for &s in &ro.states {
                let row = g.row_mut(s, v);
                for x in row.iter_mut() {
                    *x = rng.random_range(-1.0..1.0);
                }
            }
        }
        p.apply_update(&g, scale).unwrap()
    }

    fn assert_close(a: &GradVector, b: &GradVector, tol: f64) {
        let mut d = a.clone();
        d.axpy(-1.0, b);
        assert!(d.norm() <= tol, "gradients differ by {}", d.norm());
    }

    #[test]
    fn ratio_one_reduces_to_weighted_score_gradient() {
        let (ds, p) = setup();
        let ros = group(&p, &ds.instances[0], 6, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let adv: Vec<Vec<f64>> = ros.iter().map(|r| (0..r.len()).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let got = surrogate_gradient(&p, &ros, &adv, 0.2, LengthNorm::TokenMean).unwrap();
        let mut want = GradVector::default();
        for (ro, a) in ros.iter().zip(&adv) {
            for (t, &at) in a.iter().enumerate() {
                let w = at / (ros.len() * ro.len()) as f64;
                want.axpy(w, &p.grad_logprob(ro.states[t], ro.tokens[t]).unwrap());
            }
        }
        assert_close(&got, &want, 1e-12);
        assert!(got.norm() > 0.0);
    }

    #[test]
    fn clipped_tokens_ignore_their_advantages() {
        let (ds, p) = setup();
        let ros = group(&p, &ds.instances[1], 8, 5);
        let moved = random_update(&p, &ros, 1.5, 9);
        let adv: Vec<Vec<f64>> = ros.iter().map(|r| (0..r.len()).map(|t| if t % 2 == 0 { 1.0 } else { -1.0 }).collect()).collect();
        let base = surrogate_gradient(&moved, &ros, &adv, 0.2, LengthNorm::TokenMean).unwrap();
        let mut perturbed = adv.clone();
        let mut n_clipped = 0;
        for (ro, a) in ros.iter().zip(perturbed.iter_mut()) {
            for (t, at) in a.iter_mut().enumerate() {
                let r = (moved.logprob(ro.states[t], ro.tokens[t]).unwrap() - ro.old_logprobs[t]).exp();
                if clipped(r, *at, 0.2) {
                    *at *= 7.5;
                    n_clipped += 1;
                }
            }
        }
        assert!(n_clipped > 0, "fixture produced no clipped tokens");
        let after = surrogate_gradient(&moved, &ros, &perturbed, 0.2, LengthNorm::TokenMean).unwrap();
        assert_close(&base, &after, 0.0);
    }

    #[test]
    fn saturated_clip_gives_no_gradient() {
        let (ds, p) = setup();
        let mut ro = group(&p, &ds.instances[0], 1, 1).remove(0);
        ro.old_logprobs.iter_mut().for_each(|l| *l -= 1.0);
        let pos = vec![vec![1.0; ro.len()]];
        let g = surrogate_gradient(&p, std::slice::from_ref(&ro), &pos, 0.2, LengthNorm::TokenMean).unwrap();
        assert_eq!(g.norm(), 0.0);
        // Negative advantage with r > 1 + eps is not clipped.
        let neg = vec![vec![-1.0; ro.len()]];
        let g = surrogate_gradient(&p, std::slice::from_ref(&ro), &neg, 0.2, LengthNorm::TokenMean).unwrap();
        assert!(g.norm() > 0.0);
    }

    #[test]
    fn zero_advantages_give_zero_gradient() {
        let (ds, p) = setup();
        let ros = group(&p, &ds.instances[0], 1, 2);
        let adv = vec![vec![0.0; ros[0].len()]];
        assert_eq!(surrogate_gradient(&p, &ros, &adv, 0.2, LengthNorm::TokenMean).unwrap().norm(), 0.0);
    }

    #[test]
    fn zero_old_probability_is_a_contract_error() {
        let (ds, p) = setup();
        let mut ros = group(&p, &ds.instances[0], 1, 2);
        ros[0].old_logprobs[0] = f64::NEG_INFINITY;
        let adv = vec![vec![1.0; ros[0].len()]];
        assert!(matches!(surrogate_gradient(&p, &ros, &adv, 0.2, LengthNorm::TokenMean), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn two_rollout_group_matches_hand_evaluation() {
        let (ds, p) = setup();
        let ros = group(&p, &ds.instances[2], 2, 40);
        let a = group_advantages(&[1.0, 0.0]).unwrap().advantages;
        assert_eq!(a, vec![1.0, -1.0]);
        let adv: Vec<Vec<f64>> = ros.iter().zip(&a).map(|(r, &x)| vec![x; r.len()]).collect();
        let got = surrogate_gradient(&p, &ros, &adv, 0.999, LengthNorm::TokenMean).unwrap();
        let mut want = GradVector::default();
        for (ro, sign) in ros.iter().zip([0.5, -0.5]) {
            for t in 0..ro.len() {
                want.axpy(sign / ro.len() as f64, &p.grad_logprob(ro.states[t], ro.tokens[t]).unwrap());
            }
        }
        assert_close(&got, &want, 1e-12);
    }

    #[test]
    fn surrogate_gradient_matches_finite_differences_away_from_kinks() {
        let (ds, p) = setup();
        let ros = group(&p, &ds.instances[3], 4, 70);
        let moved = random_update(&p, &ros, 0.05, 1);
        let adv: Vec<Vec<f64>> = ros.iter().enumerate().map(|(i, r)| vec![i as f64 - 1.5; r.len()]).collect();
        let g = surrogate_gradient(&moved, &ros, &adv, 0.2, LengthNorm::TokenSum).unwrap();
        let h = 1e-6;
        for (&s, row) in g.iter() {
            for (v, &an) in row.iter().enumerate() {
                let Some(x) = moved.row(s).unwrap()[v] else { continue };
                let mut plus = moved.clone();
                let mut minus = moved.clone();
                plus.set_logit(s, v as u32, Some(x + h)).unwrap();
                minus.set_logit(s, v as u32, Some(x - h)).unwrap();
                let fd = (surrogate_value(&plus, &ros, &adv, 0.2, LengthNorm::TokenSum).unwrap()
                    - surrogate_value(&minus, &ros, &adv, 0.2, LengthNorm::TokenSum).unwrap())
                    / (2.0 * h);
                assert!((fd - an).abs() / fd.abs().max(an.abs()).max(1.0) < 1e-6, "fd {fd} analytic {an}");
            }
        }
    }

    #[test]
    fn reinforce_gradient_examples() {
        let (ds, p) = setup();
        let ros = group(&p, &ds.instances[0], 1, 8);
        let g = reinforce_gradient(&p, &ros, &[1.0]).unwrap();
        let mut want = GradVector::default();
        for (&s, &t) in ros[0].states.iter().zip(&ros[0].tokens) {
            want.axpy(1.0, &p.grad_logprob(s, t).unwrap());
        }
        assert_close(&g, &want, 1e-15);
        assert_eq!(reinforce_gradient(&p, &ros, &[0.0]).unwrap().norm(), 0.0);
        assert!(reinforce_gradient(&p, &ros, &[1.0, 0.0]).is_err());
    }

    #[test]
    fn kl_gradient_matches_finite_differences() {
        let (ds, p) = setup();
        let ros = group(&p, &ds.instances[0], 4, 8);
        let moved = random_update(&p, &ros, 0.5, 2);
        let states: BTreeSet<_> = ros.iter().flat_map(|r| r.states.iter().copied()).collect();
        let g = kl_gradient(&moved, &p, &states).unwrap();
        let h = 1e-6;
        for (&s, row) in g.iter() {
            for (v, &an) in row.iter().enumerate() {
                let Some(x) = moved.row(s).unwrap()[v] else {
                    assert_eq!(an, 0.0);
                    continue;
                };
                let mut plus = moved.clone();
                let mut minus = moved.clone();
                plus.set_logit(s, v as u32, Some(x + h)).unwrap();
                minus.set_logit(s, v as u32, Some(x - h)).unwrap();
                let fd = (total_kl(&plus, &p, &states).unwrap() - total_kl(&minus, &p, &states).unwrap()) / (2.0 * h);
                assert!((fd - an).abs() / fd.abs().max(an.abs()).max(1.0) < 1e-6, "fd {fd} analytic {an}");
            }
        }
    }

    #[test]
    fn pure_kl_step_decreases_divergence() {
        let (ds, p) = setup();
        let ros = group(&p, &ds.instances[0], 4, 8);
        let moved = random_update(&p, &ros, 1.0, 4);
        let states: BTreeSet<_> = ros.iter().flat_map(|r| r.states.iter().copied()).collect();
        let before = total_kl(&moved, &p, &states).unwrap();
        assert!(before > 0.0);
        let g = kl_gradient(&moved, &p, &states).unwrap();
        for lr in [1e-3, 1e-2] {
            let mut dir = GradVector::default();
            dir.axpy(-1.0, &g);
            let after = total_kl(&moved.apply_update(&dir, lr).unwrap(), &p, &states).unwrap();
            assert!(after < before, "lr {lr}: {after} !< {before}");
        }
        assert_eq!(total_kl(&p, &p, &states).unwrap(), 0.0);
        assert_eq!(kl_gradient(&p, &p, &states).unwrap().norm(), 0.0);
    }
}
