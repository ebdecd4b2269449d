//! Group- and batch-normalized advantages, and the factuality-aware
//! token-level sign adjustment.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::verify::{Rollout, StepLabel};

/// Groups whose population std falls below this get all-zero advantages.
pub const DEGENERATE_STD: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAdvantages {
    pub advantages: Vec<f64>,
    pub degenerate: bool,
}

fn mean_and_pop_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `(R_i - mean) / std` with the population std of the group.
pub fn group_advantages(rewards: &[f64]) -> Result<GroupAdvantages> {
    if rewards.len() < 2 {
        return Err(contract(format!("group normalization needs G >= 2, got {}", rewards.len())));
    }
    let (mean, std) = mean_and_pop_std(rewards);
    if std < DEGENERATE_STD {
        return Ok(GroupAdvantages { advantages: vec![0.0; rewards.len()], degenerate: true });
    }
    Ok(GroupAdvantages { advantages: rewards.iter().map(|r| (r - mean) / std).collect(), degenerate: false })
}

/// `(R_i - batch mean) / (batch std + 1e-8)` over every rollout in the batch.
pub fn batch_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(contract(format!("batch normalization needs at least 2 rollouts, got {}", rewards.len())));
    }
    let (mean, std) = mean_and_pop_std(rewards);
    Ok(rewards.iter().map(|r| (r - mean) / (std + 1e-8)).collect())
}

/// Per-token advantage for one token of a step with the given label.
///
/// Keeps `a` when its sign agrees with the label, flips it when they
/// disagree, and leaves it alone when either is zero.
pub fn adjust(a: f64, label: StepLabel) -> f64 {
    match label {
        StepLabel::Entailed if a < 0.0 => -a,
        StepLabel::Contradicted if a > 0.0 => -a,
        _ => a,
    }
}

/// Expands rollout advantage `a` to every token, adjusting tokens inside
/// labelled steps. Tokens outside steps (marker, answer, EOS) keep `a`.
pub fn adjust_token_advantages(a: f64, rollout: &Rollout, labels: &[StepLabel]) -> Result<Vec<f64>> {
    if labels.len() != rollout.steps.len() {
        return Err(contract(format!("{} labels for {} steps", labels.len(), rollout.steps.len())));
    }
    let mut out = vec![a; rollout.len()];
    for (&(start, end), &label) in rollout.steps.iter().zip(labels) {
        let adj = adjust(a, label);
        out[start..end].iter_mut().for_each(|x| *x = adj);
    }
    Ok(out)
}

/// Rollout advantage broadcast unchanged to every token.
pub fn uniform_token_advantages(a: f64, rollout: &Rollout) -> Vec<f64> {
    vec![a; rollout.len()]
}
