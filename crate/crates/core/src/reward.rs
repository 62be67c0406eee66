//! Scalar reward for policy-optimisation training built on the metric suite.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::EvalSample;
use crate::evaluator::{evaluate_sample, EvalConfig, EvalError, SampleReport};
use crate::provider::ScoringProvider;

#[derive(Debug, Error)]
pub enum RewardError {
    #[error("reward weights must be non-negative and sum to 1, got {0:?}")]
    InvalidWeights([f64; 5]),
    #[error("batch has {samples} sample ids but {answers} answers")]
    LengthMismatch { samples: usize, answers: usize },
    #[error("unknown sample id {0:?}")]
    UnknownSample(String),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Weights in metric column order: rouge1, edit distance, kendall,
/// alignment, clip.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    weights: [f64; 5],
    pub gate_invalid_format: bool,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            weights: [0.2; 5],
            gate_invalid_format: true,
        }
    }
}

impl RewardConfig {
    pub fn new(weights: [f64; 5], gate_invalid_format: bool) -> Result<Self, RewardError> {
        let sum: f64 = weights.iter().sum();
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(RewardError::InvalidWeights(weights));
        }
        Ok(RewardConfig {
            weights,
            gate_invalid_format,
        })
    }

    pub fn weights(&self) -> [f64; 5] {
        self.weights
    }
}

/// Weighted sum of the report's scores mapped to [0, 1].
pub fn reward_from_report(report: &SampleReport, config: &RewardConfig) -> f64 {
    if config.gate_invalid_format && report.flags.invalid_format {
        return 0.0;
    }
    let r: f64 = report
        .scores()
        .iter()
        .zip(config.weights)
        .map(|(s, w)| w * s / 100.0)
        .sum();
    r.clamp(0.0, 1.0)
}

pub fn compute_reward(
    sample: &EvalSample,
    answer_markdown: &str,
    provider: &dyn ScoringProvider,
    config: &RewardConfig,
    eval: &EvalConfig,
) -> Result<f64, RewardError> {
    let report = evaluate_sample(sample, answer_markdown, provider, eval)?;
    Ok(reward_from_report(&report, config))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRewardRequest {
    pub samples: Vec<String>,
    pub answers: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRewardResponse {
    pub rewards: Vec<f64>,
}

/// Serves one batch of the trainer protocol against a loaded corpus.
/// Rewards come back in request order.
pub fn handle_batch(
    corpus: &HashMap<String, EvalSample>,
    request: &BatchRewardRequest,
    provider: &dyn ScoringProvider,
    config: &RewardConfig,
    eval: &EvalConfig,
) -> Result<BatchRewardResponse, RewardError> {
    if request.samples.len() != request.answers.len() {
        return Err(RewardError::LengthMismatch {
            samples: request.samples.len(),
            answers: request.answers.len(),
        });
    }
    let rewards = request
        .samples
        .iter()
        .zip(&request.answers)
        .map(|(id, answer)| {
            let sample = corpus
                .get(id)
                .ok_or_else(|| RewardError::UnknownSample(id.clone()))?;
            compute_reward(sample, answer, provider, config, eval)
        })
        .collect::<Result<_, _>>()?;
    Ok(BatchRewardResponse { rewards })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::answer::FailureFlags;
    use crate::corpus::fixtures::sample;
    use crate::provider::MockProvider;
    use proptest::prelude::*;

    const GT: &str = "Step one ![a](IMG#1) then step two ![b](IMG#2) done.";

    #[test]
    fn weights_validated() {
        assert!(RewardConfig::new([0.5, 0.5, 0.0, 0.0, 0.0], true).is_ok());
        assert!(RewardConfig::new([0.5, 0.6, 0.0, 0.0, 0.0], true).is_err());
        assert!(RewardConfig::new([1.5, -0.5, 0.0, 0.0, 0.0], true).is_err());
    }

    #[test]
    fn ground_truth_gets_full_reward() {
        let s = sample("s", &[&[1, 2, 3]], GT);
        let r = compute_reward(
            &s,
            GT,
            &MockProvider::uniform(),
            &RewardConfig::default(),
            &EvalConfig::default(),
        )
        .unwrap();
        assert!((r - 1.0).abs() < 1e-12);
    }

    #[test]
    fn invalid_format_gated_to_zero() {
        let s = sample("s", &[&[1, 2]], GT);
        let bad = "Step one ![a](IMG#1 then step two";
        let cfg = RewardConfig::default();
        let r = compute_reward(
            &s,
            bad,
            &MockProvider::uniform(),
            &cfg,
            &EvalConfig::default(),
        )
        .unwrap();
        assert_eq!(r, 0.0);
        let ungated = RewardConfig::new([0.2; 5], false).unwrap();
        let r = compute_reward(
            &s,
            bad,
            &MockProvider::uniform(),
            &ungated,
            &EvalConfig::default(),
        )
        .unwrap();
        assert!(r > 0.0);
    }

    #[test]
    fn weighted_sum_fixture() {
        let rep =
            SampleReport::from_scores("x", [100.0, 50.0, 50.0, 0.0, 0.0], FailureFlags::default());
        assert!((reward_from_report(&rep, &RewardConfig::default()) - 0.4).abs() < 1e-12);
    }

    #[test]
    fn repeated_calls_agree() {
        let s = sample("s", &[&[1, 2, 3]], GT);
        let answer = "Step two ![b](IMG#2) and one ![a](IMG#3)";
        let p = MockProvider::hashed();
        let cfg = RewardConfig::default();
        let first = compute_reward(&s, answer, &p, &cfg, &EvalConfig::default()).unwrap();
        for _ in 0..5 {
            assert_eq!(
                compute_reward(&s, answer, &p, &cfg, &EvalConfig::default()).unwrap(),
                first
            );
        }
    }

    #[test]
    fn batch_protocol_order_and_errors() {
        let corpus: HashMap<String, EvalSample> = [
            ("a".to_string(), sample("a", &[&[1, 2]], GT)),
            ("b".to_string(), sample("b", &[&[1, 2]], GT)),
        ]
        .into();
        let req: BatchRewardRequest = serde_json::from_str(
            r#"{"samples": ["b", "a"], "answers": ["Step one ![a](IMG#1) then step two ![b](IMG#2) done.", "![a](IMG#1"]}"#,
        )
        .unwrap();
        let p = MockProvider::uniform();
        let resp = handle_batch(
            &corpus,
            &req,
            &p,
            &RewardConfig::default(),
            &EvalConfig::default(),
        )
        .unwrap();
        assert_eq!(resp.rewards.len(), 2);
        assert!((resp.rewards[0] - 1.0).abs() < 1e-12);
        assert_eq!(resp.rewards[1], 0.0);
        let json = serde_json::to_value(&resp).unwrap();
        assert!(json["rewards"].is_array());

        let bad = BatchRewardRequest {
            samples: vec!["a".into()],
            answers: vec![],
        };
        assert!(matches!(
            handle_batch(
                &corpus,
                &bad,
                &p,
                &RewardConfig::default(),
                &EvalConfig::default()
            ),
            Err(RewardError::LengthMismatch { .. })
        ));
        let unknown = BatchRewardRequest {
            samples: vec!["zz".into()],
            answers: vec!["x".into()],
        };
        assert!(matches!(
            handle_batch(
                &corpus,
                &unknown,
                &p,
                &RewardConfig::default(),
                &EvalConfig::default()
            ),
            Err(RewardError::UnknownSample(_))
        ));
    }

    proptest! {
        #[test]
        fn bounded_monotone_and_concentrated(
            scores in proptest::array::uniform5(0.0f64..=100.0),
            bump in 0.0f64..50.0,
            which in 0usize..5,
        ) {
            let cfg = RewardConfig::default();
            let base = SampleReport::from_scores("x", scores, FailureFlags::default());
            let r = reward_from_report(&base, &cfg);
            prop_assert!((0.0..=1.0).contains(&r));
            let mut higher = scores;
            higher[which] = (higher[which] + bump).min(100.0);
            let r2 = reward_from_report(&SampleReport::from_scores("x", higher, FailureFlags::default()), &cfg);
            prop_assert!(r2 >= r - 1e-15);
            let mut w = [0.0; 5];
            w[which] = 1.0;
            let single = RewardConfig::new(w, true).unwrap();
            prop_assert_eq!(reward_from_report(&base, &single), scores[which] / 100.0);
        }
    }
}
