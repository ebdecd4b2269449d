//! The sampling / scoring / single-step update loop.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{Algorithm, TrainConfig};
use super::objective::{kl_gradient, reinforce_gradient, surrogate_gradient, surrogate_value, total_kl, LengthNorm};
use crate::advantage::{adjust_token_advantages, batch_advantages, group_advantages, uniform_token_advantages};
use crate::corpus::{Dataset, QaInstance};
use crate::error::{Error, Result};
use crate::policy::{sample_rollout, GradVector, PolicyParams, StateIndex};
use crate::reward::{answer_reward, RewardBreakdown};
use crate::verify::{label_rollout, Rollout, StepLabel, VerifierBackend};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub iteration: usize,
    pub mean_reward: f64,
    pub answer_accuracy: f64,
    pub contradiction_rate: f64,
    pub entailed_rate: f64,
    pub mean_entropy: f64,
    pub surrogate: f64,
    pub grad_norm: f64,
    pub mean_kl: f64,
}

/// A rollout with everything the update derived from it.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredRollout {
    pub rollout: Rollout,
    pub algorithm: Algorithm,
    pub reward: RewardBreakdown,
    /// Reward actually optimized under the run's reward mode.
    pub train_reward: f64,
    pub advantage: f64,
    pub token_advantages: Vec<f64>,
}

pub struct IterationOutcome {
    pub stats: UpdateStats,
    pub rollouts: Vec<ScoredRollout>,
}

/// Owns the policy, its frozen reference, and the run's single random stream.
pub struct Trainer<'a> {
    config: TrainConfig,
    dataset: &'a Dataset,
    backend: &'a dyn VerifierBackend,
    policy: PolicyParams,
    reference: PolicyParams,
    rng: ChaCha8Rng,
    iteration: usize,
    partitions: Vec<(Algorithm, Vec<usize>)>,
}

pub fn initial_policy(dataset: &Dataset, config: &TrainConfig) -> Result<PolicyParams> {
    let ids: Vec<_> = dataset.instances.iter().map(|i| i.id).collect();
    config.prior.build(&dataset.vocab, &ids, config.context_order, config.temperature)
}

impl<'a> Trainer<'a> {
    pub fn new(policy: PolicyParams, dataset: &'a Dataset, config: TrainConfig, backend: &'a dyn VerifierBackend) -> Result<Self> {
        config.validate()?;
        if dataset.instances.is_empty() {
            return Err(Error::Config("dataset has no instances".into()));
        }
        let mut by_alg: BTreeMap<Algorithm, Vec<usize>> = BTreeMap::new();
        for (i, inst) in dataset.instances.iter().enumerate() {
            by_alg.entry(inst.algorithm.unwrap_or(config.algorithm)).or_default().push(i);
        }
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self {
            reference: policy.snapshot(),
            policy,
            dataset,
            backend,
            rng,
            iteration: 0,
            partitions: by_alg.into_iter().collect(),
            config,
        })
    }

    pub fn policy(&self) -> &PolicyParams {
        &self.policy
    }

    pub fn reference(&self) -> &PolicyParams {
        &self.reference
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn into_policy(self) -> PolicyParams {
        self.policy
    }

    /// Draws the prompt batch. Mixed-objective datasets alternate partitions
    /// between iterations.
    fn sample_batch(&mut self) -> (Algorithm, Vec<usize>) {
        let (alg, members) = &self.partitions[self.iteration % self.partitions.len()];
        let mut idx = members.clone();
        idx.shuffle(&mut self.rng);
        idx.truncate(self.config.batch_size);
        (*alg, idx)
    }

    /// Samples, scores and applies one update.
    pub fn step(&mut self) -> Result<IterationOutcome> {
        let cfg = self.config.clone();
        let (algorithm, batch) = self.sample_batch();
        let g = cfg.group_size;

        let mut groups: Vec<(&QaInstance, Vec<Rollout>)> = Vec::with_capacity(batch.len());
        for &i in &batch {
            let inst = &self.dataset.instances[i];
            let mut group = Vec::with_capacity(g);
            for _ in 0..g {
                let seed = self.rng.next_u64();
                group.push(sample_rollout(&self.policy, inst, cfg.max_len, seed)?);
            }
            groups.push((inst, group));
        }

        // Labels are always computed so contradiction metrics exist for every arm;
        // answer-only runs simply leave them out of the reward.
        let mut rewards: Vec<Vec<RewardBreakdown>> = Vec::with_capacity(groups.len());
        for (inst, group) in &groups {
            let mut rs = Vec::with_capacity(group.len());
            for ro in group {
                let labels = label_rollout(ro, inst, self.backend)?;
                rs.push(RewardBreakdown::new(answer_reward(ro, inst), labels));
            }
            rewards.push(rs);
        }
        let train_rewards: Vec<Vec<f64>> =
            rewards.iter().map(|rs| rs.iter().map(|r| cfg.reward_for(r.answer, r.factuality_mean)).collect()).collect();

        let advantages = compute_advantages(algorithm, &train_rewards)?;

        let mut token_advs: Vec<Vec<Vec<f64>>> = Vec::with_capacity(groups.len());
        for (gi, (_, group)) in groups.iter().enumerate() {
            let mut rows = Vec::with_capacity(group.len());
            for (ri, ro) in group.iter().enumerate() {
                rows.push(token_advantages_for(algorithm, advantages[gi][ri], ro, &rewards[gi][ri].step_labels)?);
            }
            token_advs.push(rows);
        }

        // theta_old is the sampling policy; ratios are taken against the
        // log-probs recorded in each rollout.
        let norm = if algorithm == Algorithm::Ppo { LengthNorm::TokenSum } else { LengthNorm::TokenMean };
        let mut direction = GradVector::default();
        let mut surrogate = 0.0;
        for (gi, (_, group)) in groups.iter().enumerate() {
            if algorithm == Algorithm::Reinforce {
                direction.axpy(1.0, &reinforce_gradient(&self.policy, group, &train_rewards[gi])?);
                surrogate += group.iter().zip(&train_rewards[gi]).map(|(ro, r)| r * ro.len() as f64).sum::<f64>() / group.len() as f64;
            } else {
                direction.axpy(1.0, &surrogate_gradient(&self.policy, group, &token_advs[gi], cfg.clip_eps, norm)?);
                surrogate += surrogate_value(&self.policy, group, &token_advs[gi], cfg.clip_eps, norm)?;
            }
        }

        let visited: BTreeSet<StateIndex> = groups.iter().flat_map(|(_, gr)| gr.iter().flat_map(|r| r.states.iter().copied())).collect();
        let kl_sum = total_kl(&self.policy, &self.reference, &visited)?;
        if cfg.kl_coef > 0.0 {
            direction.axpy(-cfg.kl_coef, &kl_gradient(&self.policy, &self.reference, &visited)?);
        }
        let entropy_sum: f64 = visited.iter().map(|&s| self.policy.entropy(s)).sum::<Result<f64>>()?;

        let n_rollouts = (groups.len() * g) as f64;
        let all_rewards: Vec<&RewardBreakdown> = rewards.iter().flatten().collect();
        let n_steps: usize = all_rewards.iter().map(|r| r.step_labels.len()).sum();
        let count = |l: StepLabel| all_rewards.iter().flat_map(|r| &r.step_labels).filter(|&&x| x == l).count();
        let rate = |c: usize| if n_steps == 0 { 0.0 } else { c as f64 / n_steps as f64 };
        let stats = UpdateStats {
            iteration: self.iteration,
            mean_reward: train_rewards.iter().flatten().sum::<f64>() / n_rollouts,
            answer_accuracy: all_rewards.iter().map(|r| r.answer).sum::<f64>() / n_rollouts,
            contradiction_rate: rate(count(StepLabel::Contradicted)),
            entailed_rate: rate(count(StepLabel::Entailed)),
            mean_entropy: entropy_sum / visited.len().max(1) as f64,
            surrogate,
            grad_norm: direction.norm(),
            mean_kl: kl_sum / visited.len().max(1) as f64,
        };

        self.policy.apply_update_mut(&direction, cfg.learning_rate)?;
        self.iteration += 1;

        let mut scored = Vec::with_capacity(groups.len() * g);
        for (gi, (_, group)) in groups.into_iter().enumerate() {
            for (ri, ro) in group.into_iter().enumerate() {
                scored.push(ScoredRollout {
                    rollout: ro,
                    algorithm,
                    reward: rewards[gi][ri].clone(),
                    train_reward: train_rewards[gi][ri],
                    advantage: advantages[gi][ri],
                    token_advantages: std::mem::take(&mut token_advs[gi][ri]),
                });
            }
        }
        Ok(IterationOutcome { stats, rollouts: scored })
    }
}

/// Rollout-level advantages for one batch of groups under `algorithm`.
pub fn compute_advantages(algorithm: Algorithm, rewards: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    match algorithm {
        Algorithm::Grpo | Algorithm::Fspo => rewards.iter().map(|rs| group_advantages(rs).map(|ga| ga.advantages)).collect(),
        Algorithm::ReinforcePp | Algorithm::FspoReinforcePp => {
            let flat: Vec<f64> = rewards.iter().flatten().copied().collect();
            let mut normed = batch_advantages(&flat)?.into_iter();
            Ok(rewards.iter().map(|rs| normed.by_ref().take(rs.len()).collect()).collect())
        }
        Algorithm::Ppo | Algorithm::Reinforce => Ok(rewards.to_vec()),
    }
}

/// Per-token advantages: re-signed by step labels for the factuality-aware
/// variants, broadcast unchanged otherwise.
pub fn token_advantages_for(algorithm: Algorithm, advantage: f64, rollout: &Rollout, labels: &[StepLabel]) -> Result<Vec<f64>> {
    if algorithm.adjusts_tokens() {
        adjust_token_advantages(advantage, rollout, labels)
    } else {
        Ok(uniform_token_advantages(advantage, rollout))
    }
}

pub struct TrainOutcome {
    pub stats: Vec<UpdateStats>,
    pub policy: PolicyParams,
}

/// Runs `config.iterations` updates from `policy`.
pub fn train(policy: PolicyParams, dataset: &Dataset, config: &TrainConfig, backend: &dyn VerifierBackend) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(policy, dataset, config.clone(), backend)?;
    let mut stats = Vec::with_capacity(config.iterations);
    for _ in 0..config.iterations {
        stats.push(trainer.step()?.stats);
    }
    Ok(TrainOutcome { stats, policy: trainer.into_policy() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::WorldSpec;
    use crate::optim::RewardMode;
    use crate::verify::{NeutralVerifier, OracleVerifier};

    fn setup(iterations: usize) -> (Dataset, TrainConfig) {
        let ds = Dataset::generate(&WorldSpec::two_hop_default()).unwrap();
        let cfg = TrainConfig { iterations, ..TrainConfig::default() };
        (ds, cfg)
    }

    fn run(ds: &Dataset, cfg: &TrainConfig, backend: &dyn VerifierBackend) -> TrainOutcome {
        train(initial_policy(ds, cfg).unwrap(), ds, cfg, backend).unwrap()
    }

    #[test]
    fn same_seed_gives_identical_streams() {
        let (ds, cfg) = setup(15);
        let oracle = OracleVerifier::new(ds.vocab.clone());
        let a = run(&ds, &cfg, &oracle);
        let b = run(&ds, &cfg, &oracle);
        assert_eq!(a.stats, b.stats);
        assert_eq!(a.policy, b.policy);
        let c = run(&ds, &TrainConfig { seed: 7, ..cfg }, &oracle);
        assert_ne!(a.stats, c.stats);
    }

    #[test]
    fn fspo_and_grpo_coincide_under_a_neutral_verifier() {
        let (ds, cfg) = setup(20);
        let grpo = TrainConfig { algorithm: Algorithm::Grpo, reward_mode: RewardMode::AnswerOnly, ..cfg.clone() };
        let fspo = TrainConfig { algorithm: Algorithm::Fspo, reward_mode: RewardMode::AnswerPlusFactuality, ..cfg };
        let a = run(&ds, &grpo, &NeutralVerifier);
        let b = run(&ds, &fspo, &NeutralVerifier);
        assert_eq!(a.stats, b.stats);
        assert_eq!(a.policy, b.policy);
    }

    #[test]
    fn fspo_adjusts_each_token_exactly_once() {
        let (ds, cfg) = setup(1);
        let oracle = OracleVerifier::new(ds.vocab.clone());
        let mut t = Trainer::new(initial_policy(&ds, &cfg).unwrap(), &ds, cfg, &oracle).unwrap();
        let out = t.step().unwrap();
        let mut flipped = 0;
        for s in &out.rollouts {
            let once = adjust_token_advantages(s.advantage, &s.rollout, &s.reward.step_labels).unwrap();
            assert_eq!(s.token_advantages, once);
            flipped += s.token_advantages.iter().filter(|&&x| x != s.advantage).count();
        }
        assert!(flipped > 0, "no token was re-signed in the first batch");
    }

    #[test]
    fn grpo_broadcasts_rollout_advantages() {
        let (ds, cfg) = setup(1);
        let cfg = TrainConfig { algorithm: Algorithm::Grpo, ..cfg };
        let oracle = OracleVerifier::new(ds.vocab.clone());
        let mut t = Trainer::new(initial_policy(&ds, &cfg).unwrap(), &ds, cfg, &oracle).unwrap();
        let out = t.step().unwrap();
        for group in out.rollouts.chunks(8) {
            let sum: f64 = group.iter().map(|s| s.advantage).sum();
            assert!(sum.abs() < 1e-9);
        }
        for s in &out.rollouts {
            assert!(s.token_advantages.iter().all(|&x| x == s.advantage));
            assert_eq!(s.train_reward, s.reward.final_reward);
        }
    }

    #[test]
    fn answer_only_mode_ignores_step_labels_in_the_reward() {
        let (ds, cfg) = setup(1);
        let cfg = TrainConfig { algorithm: Algorithm::Grpo, reward_mode: RewardMode::AnswerOnly, ..cfg };
        let oracle = OracleVerifier::new(ds.vocab.clone());
        let mut t = Trainer::new(initial_policy(&ds, &cfg).unwrap(), &ds, cfg, &oracle).unwrap();
        for s in t.step().unwrap().rollouts {
            assert_eq!(s.train_reward, s.reward.answer);
        }
    }

    #[test]
    fn stats_stay_in_range() {
        let (ds, cfg) = setup(10);
        let oracle = OracleVerifier::new(ds.vocab.clone());
        for alg in [Algorithm::Reinforce, Algorithm::Ppo, Algorithm::ReinforcePp, Algorithm::FspoReinforcePp] {
            let out = run(&ds, &TrainConfig { algorithm: alg, ..cfg.clone() }, &oracle);
            for (i, s) in out.stats.iter().enumerate() {
                assert_eq!(s.iteration, i);
                for r in [s.answer_accuracy, s.contradiction_rate, s.entailed_rate] {
                    assert!((0.0..=1.0).contains(&r));
                }
                assert!(s.grad_norm >= 0.0 && s.mean_kl >= 0.0 && s.mean_entropy >= 0.0);
            }
        }
    }

    #[test]
    fn tagged_instances_alternate_between_objectives() {
        let (mut ds, cfg) = setup(4);
        for (i, inst) in ds.instances.iter_mut().enumerate() {
            inst.algorithm = Some(if i % 2 == 0 { Algorithm::Reinforce } else { Algorithm::Fspo });
        }
        let oracle = OracleVerifier::new(ds.vocab.clone());
        let mut t = Trainer::new(initial_policy(&ds, &cfg).unwrap(), &ds, cfg, &oracle).unwrap();
        let algs: Vec<_> = (0..4).map(|_| t.step().unwrap().rollouts[0].algorithm).collect();
        assert_eq!(algs, vec![Algorithm::Reinforce, Algorithm::Fspo, Algorithm::Reinforce, Algorithm::Fspo]);
    }

    #[test]
    fn training_improves_answer_accuracy() {
        let (ds, cfg) = setup(120);
        let oracle = OracleVerifier::new(ds.vocab.clone());
        let out = run(&ds, &cfg, &oracle);
        let head: f64 = out.stats[..10].iter().map(|s| s.answer_accuracy).sum::<f64>() / 10.0;
        let tail: f64 = out.stats[110..].iter().map(|s| s.answer_accuracy).sum::<f64>() / 10.0;
        assert!(tail > head + 0.05, "accuracy {head} -> {tail}");
    }
}
