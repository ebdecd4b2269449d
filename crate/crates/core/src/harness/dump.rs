//! Rollout dump records and offline re-scoring.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Dataset, InstanceId, Token};
use crate::error::{Error, Result};
use crate::optim::{compute_advantages, token_advantages_for, Algorithm, RewardMode, ScoredRollout, TrainConfig};
use crate::policy::StateIndex;
use crate::reward::{answer_reward, RewardBreakdown};
use crate::verify::{label_rollout, Rollout, Span, StepLabel, VerifierBackend};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutRecord {
    pub iteration: usize,
    /// Position of the rollout's group within the iteration's batch.
    pub group: usize,
    pub instance_id: InstanceId,
    pub algorithm: Algorithm,
    pub reward_mode: RewardMode,
    pub tokens: Vec<Token>,
    pub old_logprobs: Vec<f64>,
    pub states: Vec<StateIndex>,
    pub truncated: bool,
    pub steps: Vec<Span>,
    pub answer: Option<Span>,
    pub labels: Vec<StepLabel>,
    pub reward: RewardBreakdown,
    pub train_reward: f64,
    pub advantage: f64,
    pub token_advantages: Vec<f64>,
}

impl RolloutRecord {
    pub fn new(iteration: usize, group: usize, reward_mode: RewardMode, s: &ScoredRollout) -> Self {
        let r = &s.rollout;
        Self {
            iteration,
            group,
            instance_id: r.instance_id,
            algorithm: s.algorithm,
            reward_mode,
            tokens: r.tokens.clone(),
            old_logprobs: r.old_logprobs.clone(),
            states: r.states.clone(),
            truncated: r.truncated,
            steps: r.steps.clone(),
            answer: r.answer,
            labels: s.reward.step_labels.clone(),
            reward: s.reward.clone(),
            train_reward: s.train_reward,
            advantage: s.advantage,
            token_advantages: s.token_advantages.clone(),
        }
    }

    pub fn to_rollout(&self) -> Rollout {
        Rollout {
            instance_id: self.instance_id,
            tokens: self.tokens.clone(),
            old_logprobs: self.old_logprobs.clone(),
            states: self.states.clone(),
            truncated: self.truncated,
            steps: self.steps.clone(),
            answer: self.answer,
        }
    }
}

pub struct DumpWriter {
    inner: BufWriter<File>,
}

impl DumpWriter {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        Ok(Self { inner: BufWriter::new(File::create(path)?) })
    }

    pub fn write(&mut self, rec: &RolloutRecord) -> Result<()> {
        serde_json::to_writer(&mut self.inner, rec)?;
        self.inner.write_all(b"\n")?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        Ok(self.inner.flush()?)
    }
}

pub fn read_dump(path: impl AsRef<Path>) -> Result<Vec<RolloutRecord>> {
    let reader = BufReader::new(crate::error::open_file(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    pub n_records: usize,
    pub n_iterations: usize,
    /// Human-readable description of every field that failed to reproduce.
    pub mismatches: Vec<String>,
}

impl ReplayReport {
    pub fn exact(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// Re-labels, re-rewards and re-normalizes every dumped rollout and compares
/// with the logged values bit for bit.
pub fn rescore_dump(
    records: &[RolloutRecord],
    dataset: &Dataset,
    config: &TrainConfig,
    backend: &dyn VerifierBackend,
) -> Result<ReplayReport> {
    let mut by_iter: BTreeMap<usize, BTreeMap<usize, Vec<&RolloutRecord>>> = BTreeMap::new();
    for r in records {
        by_iter.entry(r.iteration).or_default().entry(r.group).or_default().push(r);
    }
    let mut mismatches = Vec::new();
    for (&it, groups) in &by_iter {
        let groups: Vec<&Vec<&RolloutRecord>> = groups.values().collect();
        let algorithm = groups[0][0].algorithm;
        let mut rewards = Vec::new();
        let mut train = Vec::new();
        for g in &groups {
            let mut rs = Vec::new();
            let mut ts = Vec::new();
            for rec in g.iter() {
                let inst = dataset
                    .instance(rec.instance_id)
                    .ok_or_else(|| Error::Load(format!("dump references unknown instance {}", rec.instance_id)))?;
                let ro = rec.to_rollout();
                let rb = RewardBreakdown::new(answer_reward(&ro, inst), label_rollout(&ro, inst, backend)?);
                let cfg = TrainConfig { reward_mode: rec.reward_mode, ..config.clone() };
                ts.push(cfg.reward_for(rb.answer, rb.factuality_mean));
                rs.push(rb);
            }
            rewards.push(rs);
            train.push(ts);
        }
        let adv = compute_advantages(algorithm, &train)?;
        for (gi, g) in groups.iter().enumerate() {
            for (ri, rec) in g.iter().enumerate() {
                let tag = format!("iteration {it} group {gi} rollout {ri}");
                if rewards[gi][ri] != rec.reward {
                    mismatches.push(format!("{tag}: reward {:?} != logged {:?}", rewards[gi][ri], rec.reward));
                }
                if train[gi][ri].to_bits() != rec.train_reward.to_bits() {
                    mismatches.push(format!("{tag}: train reward {} != logged {}", train[gi][ri], rec.train_reward));
                }
                if adv[gi][ri].to_bits() != rec.advantage.to_bits() {
                    mismatches.push(format!("{tag}: advantage {} != logged {}", adv[gi][ri], rec.advantage));
                }
                let tok = token_advantages_for(algorithm, adv[gi][ri], &rec.to_rollout(), &rewards[gi][ri].step_labels)?;
                if tok.iter().map(|x| x.to_bits()).ne(rec.token_advantages.iter().map(|x| x.to_bits())) {
                    mismatches.push(format!("{tag}: token advantages differ"));
                }
            }
        }
    }
    Ok(ReplayReport { n_records: records.len(), n_iterations: by_iter.len(), mismatches })
}
