//! Answer, step-factuality, and composite rollout rewards.

use serde::{Deserialize, Serialize};

use crate::corpus::QaInstance;
use crate::verify::{Rollout, StepLabel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub answer: f64,
    pub step_labels: Vec<StepLabel>,
    pub factuality_mean: f64,
    pub final_reward: f64,
}

impl RewardBreakdown {
    pub fn new(answer: f64, step_labels: Vec<StepLabel>) -> Self {
        let factuality_mean = factuality_mean(&step_labels);
        Self { answer, final_reward: answer + factuality_mean, step_labels, factuality_mean }
    }
}

/// 1 when the answer span exists and equals the gold answer exactly.
pub fn answer_reward(rollout: &Rollout, instance: &QaInstance) -> f64 {
    match rollout.answer_tokens() {
        Some(ans) if ans == instance.gold_answer.as_slice() => 1.0,
        _ => 0.0,
    }
}

pub fn factuality_rewards(labels: &[StepLabel]) -> Vec<f64> {
    labels.iter().map(|l| l.value() as f64).collect()
}

/// Mean step reward; zero for a rollout without steps.
pub fn factuality_mean(labels: &[StepLabel]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    factuality_rewards(labels).iter().sum::<f64>() / labels.len() as f64
}

pub fn final_reward(answer: f64, labels: &[StepLabel]) -> f64 {
    answer + factuality_mean(labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{ANSWER_MARK, EOS, PERIOD};
    use crate::verify::segment;
    use proptest::prelude::*;
    use StepLabel::*;

    fn rollout(tokens: Vec<u32>) -> Rollout {
        let (steps, answer) = segment(&tokens);
        Rollout { instance_id: 0, old_logprobs: vec![0.0; tokens.len()], states: vec![], truncated: false, tokens, steps, answer }
    }

    fn instance() -> QaInstance {
        QaInstance { id: 0, prompt: vec![4, 7], gold_answer: vec![6], evidence: vec![], hops: 1, algorithm: None }
    }

    #[test]
    fn answer_examples() {
        assert_eq!(answer_reward(&rollout(vec![ANSWER_MARK, 6, EOS]), &instance()), 1.0);
        assert_eq!(answer_reward(&rollout(vec![ANSWER_MARK, 5, EOS]), &instance()), 0.0);
        assert_eq!(answer_reward(&rollout(vec![4, 7, 6, PERIOD, EOS]), &instance()), 0.0);
        assert_eq!(answer_reward(&rollout(vec![ANSWER_MARK, 6, 6, EOS]), &instance()), 0.0);
    }

    #[test]
    fn final_examples() {
        assert_eq!(final_reward(1.0, &[Entailed, Neutral, Contradicted, Entailed]), 1.25);
        assert_eq!(final_reward(0.0, &[]), 0.0);
        assert_eq!(final_reward(0.0, &[Contradicted, Contradicted]), -1.0);
    }

    fn label() -> impl Strategy<Value = StepLabel> {
        prop_oneof![Just(Contradicted), Just(Neutral), Just(Entailed)]
    }

    proptest! {
        #[test]
        fn range_reduction_and_monotonicity(labels in proptest::collection::vec(label(), 0..12), answer in 0u8..2, flip in any::<proptest::sample::Index>()) {
            let a = answer as f64;
            let r = RewardBreakdown::new(a, labels.clone());
            prop_assert!((-1.0..=2.0).contains(&r.final_reward));
            prop_assert_eq!(r.final_reward, a + r.factuality_mean);
            let neutral = vec![Neutral; labels.len()];
            prop_assert_eq!(final_reward(a, &neutral), a);
            if !labels.is_empty() {
                let mut neg = labels.clone();
                let j = flip.index(labels.len());
                neg[j] = Contradicted;
                let mut pos = neg.clone();
                pos[j] = Entailed;
                let gain = final_reward(a, &pos) - final_reward(a, &neg);
                prop_assert!((gain - 2.0 / labels.len() as f64).abs() < 1e-12);
            }
        }
    }
}
