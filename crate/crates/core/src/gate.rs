//! The pivot-aware acceptance gate.
//!
//! Standard speculative rejection throws away every coin-rejected token, even
//! ones that would not have hurt the task. The gate gives such tokens a
//! second chance: a scorer estimates the probability that the candidate is a
//! pivot (a token that sinks downstream utility), and rejections whose score
//! falls below the threshold `sigma` are overridden into acceptances. A
//! target-probability floor keeps tokens the target finds (near-)impossible
//! from ever being overridden, whatever the scorer says.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::classifier::{features_from_dist, mlp_forward, MlpParams};
use crate::error::Result;
use crate::model::SequenceModel;
use crate::par::{derive_seed, hash_u32s, stream_rng};
use crate::utility::{is_pivot_oracle, PivotOracleConfig, UtilityFn};
use crate::verify::{
    accept_probability, AcceptancePolicy, AuditRecord, Decision, DecisionInput, DecisionSource,
};
use crate::error::CoreError;

/// Gate settings.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct GateConfig {
    /// Override threshold: a rejection with pivot score strictly below this
    /// is accepted after all. Zero disables overrides entirely, recovering
    /// standard speculative decoding decision-for-decision.
    pub sigma: f64,
    /// Rejections whose target probability is below this floor are never
    /// overridden.
    pub prob_floor: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            sigma: 0.5,
            prob_floor: 1e-4,
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.sigma) {
            return Err(CoreError::InvalidConfig(format!(
                "sigma must lie in [0, 1), got {}",
                self.sigma
            )));
        }
        if !(self.prob_floor >= 0.0) || !self.prob_floor.is_finite() {
            return Err(CoreError::InvalidConfig(format!(
                "prob_floor must be a finite value >= 0, got {}",
                self.prob_floor
            )));
        }
        Ok(())
    }
}

/// The gate rule as a pure function of the standard decision, the pivot
/// score, and the candidate's target probability.
pub fn pad_decide(
    sd_decision: Decision,
    score: f64,
    p_target: f64,
    cfg: &GateConfig,
) -> (Decision, DecisionSource) {
    match sd_decision {
        Decision::Accept => (Decision::Accept, DecisionSource::SdAccept),
        Decision::Reject => {
            if p_target < cfg.prob_floor {
                // Guardrail first: never override a token the target gives
                // (almost) no probability, regardless of the score.
                (Decision::Reject, DecisionSource::SdReject)
            } else if score < cfg.sigma {
                (Decision::Accept, DecisionSource::PadOverride)
            } else {
                (Decision::Reject, DecisionSource::SdReject)
            }
        }
    }
}

/// Estimates P(candidate is a pivot) for a rejected token. Scorers must be
/// pure: equal inputs give equal scores, with no hidden RNG state.
pub trait PivotScorer: Send + Sync {
    fn score(&self, input: &DecisionInput<'_>) -> Result<f64>;
    fn id(&self) -> String;
}

/// Fixed-score scorer, mostly for tests and threshold experiments.
#[derive(Debug, Clone, Copy)]
pub struct ConstScorer(pub f64);

impl PivotScorer for ConstScorer {
    fn score(&self, _input: &DecisionInput<'_>) -> Result<f64> {
        Ok(self.0)
    }

    fn id(&self) -> String {
        format!("const({})", self.0)
    }
}

/// The trained classifier as a scorer. Features are built from the same
/// adjusted target distribution the accept/reject decision used.
pub struct MlpScorer {
    pub params: MlpParams,
    pub model: Arc<dyn SequenceModel>,
}

impl PivotScorer for MlpScorer {
    fn score(&self, input: &DecisionInput<'_>) -> Result<f64> {
        let features = features_from_dist(
            self.model.as_ref(),
            input.context,
            input.candidate,
            input.target_dist,
        )?;
        mlp_forward(&self.params, &features)
    }

    fn id(&self) -> String {
        "mlp".into()
    }
}

/// The brute-force pivot oracle as a scorer: 1.0 for pivots, 0.0 otherwise.
/// When the outcome space is too large for enumeration, the Monte Carlo
/// fallback derives its RNG from a fingerprint of the decision input, so the
/// score stays a pure function of the input.
pub struct OracleScorer {
    pub model: Arc<dyn SequenceModel>,
    pub utility: UtilityFn,
    pub oracle: PivotOracleConfig,
    pub seed: u64,
}

impl PivotScorer for OracleScorer {
    fn score(&self, input: &DecisionInput<'_>) -> Result<f64> {
        let task_context = &input.context[..input.task_context_len];
        let prefix = &input.context[input.task_context_len..];
        let mut ids: Vec<u32> = input.context.iter().map(|t| t.0).collect();
        ids.push(input.candidate.0);
        let mut rng = stream_rng(derive_seed(self.seed, "oracle-score", hash_u32s(&ids)), "mc", 0);
        let pivot = is_pivot_oracle(
            self.model.as_ref(),
            task_context,
            prefix,
            input.candidate,
            &self.utility,
            &self.oracle,
            &mut rng,
        )?;
        Ok(if pivot { 1.0 } else { 0.0 })
    }

    fn id(&self) -> String {
        "oracle".into()
    }
}

/// Acceptance policy combining the standard coin rule with the gate.
pub struct PadPolicy {
    pub scorer: Arc<dyn PivotScorer>,
    pub config: GateConfig,
}

impl PadPolicy {
    pub fn new(scorer: Arc<dyn PivotScorer>, config: GateConfig) -> Self {
        Self { scorer, config }
    }
}

impl AcceptancePolicy for PadPolicy {
    fn decide(&self, input: &DecisionInput<'_>) -> (Decision, DecisionSource) {
        if input.coin < accept_probability(input.p_target, input.p_draft) {
            // Standard acceptances pass through untouched; the scorer is
            // consulted only on rejections.
            return (Decision::Accept, DecisionSource::SdAccept);
        }
        let score = match self.scorer.score(input) {
            Ok(s) => s.clamp(0.0, 1.0),
            Err(e) => {
                // Fail closed: an unscorable rejection stays rejected.
                log::warn!(
                    "pivot scorer {} failed at position {}: {e}; keeping rejection",
                    self.scorer.id(),
                    input.position
                );
                1.0
            }
        };
        pad_decide(Decision::Reject, score, input.p_target, &self.config)
    }

    fn consults_classifier(&self) -> bool {
        true
    }
}

/// Number of overridden rejections that violated the probability floor;
/// always zero for runs produced by [`PadPolicy`].
pub fn floor_violations(records: &[AuditRecord], prob_floor: f64) -> usize {
    records
        .iter()
        .filter(|r| r.source == DecisionSource::PadOverride && r.p_target < prob_floor)
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::{Distribution, GenerationParams, TokenId};
    use crate::model::{make_synthetic_pair, SyntheticTaskSpec};
    use crate::par::stream_rng;
    use crate::utility::UtilityRule;
    use crate::verify::acceptance_stats;
    use crate::decode::{Decoder, SpeculativeDecoder};
    use std::sync::Mutex;

    fn gate(sigma: f64, prob_floor: f64) -> GateConfig {
        GateConfig { sigma, prob_floor }
    }

    #[test]
    fn test_pad_decide_frozen_cases() {
        let cfg = gate(0.5, 1e-4);
        // Standard acceptances pass through.
        assert_eq!(
            pad_decide(Decision::Accept, 0.9, 0.5, &cfg),
            (Decision::Accept, DecisionSource::SdAccept)
        );
        // Low score: rejection overridden.
        assert_eq!(
            pad_decide(Decision::Reject, 0.4, 0.3, &cfg),
            (Decision::Accept, DecisionSource::PadOverride)
        );
        // High score: rejection stands.
        assert_eq!(
            pad_decide(Decision::Reject, 0.6, 0.3, &cfg),
            (Decision::Reject, DecisionSource::SdReject)
        );
        // Probability floor beats even a zero score.
        let cfg = gate(0.7, 1e-4);
        assert_eq!(
            pad_decide(Decision::Reject, 0.0, 5e-5, &cfg),
            (Decision::Reject, DecisionSource::SdReject)
        );
    }

    #[test]
    fn test_pad_decide_boundaries() {
        // score == sigma is not an override (strict inequality)...
        assert_eq!(
            pad_decide(Decision::Reject, 0.5, 0.3, &gate(0.5, 0.0)),
            (Decision::Reject, DecisionSource::SdReject)
        );
        // ...and sigma == 0 disables overrides completely.
        assert_eq!(
            pad_decide(Decision::Reject, 0.0, 0.3, &gate(0.0, 0.0)),
            (Decision::Reject, DecisionSource::SdReject)
        );
        // p_target exactly at the floor is not below it.
        assert_eq!(
            pad_decide(Decision::Reject, 0.0, 1e-4, &gate(0.5, 1e-4)),
            (Decision::Accept, DecisionSource::PadOverride)
        );
    }

    #[test]
    fn test_config_validation() {
        assert!(gate(0.0, 0.0).validate().is_ok());
        assert!(gate(0.999, 1e-4).validate().is_ok());
        assert!(gate(1.0, 0.0).validate().is_err());
        assert!(gate(-0.1, 0.0).validate().is_err());
        assert!(gate(0.5, -1e-9).validate().is_err());
        assert!(gate(0.5, f64::NAN).validate().is_err());
    }

    fn decision_input<'a>(
        coin: f64,
        p_target: f64,
        p_draft: f64,
        dist: &'a Distribution,
        context: &'a [TokenId],
    ) -> DecisionInput<'a> {
        DecisionInput {
            position: 0,
            candidate: TokenId(1),
            p_target,
            p_draft,
            coin,
            context,
            task_context_len: context.len(),
            target_dist: dist,
        }
    }

    struct CountingScorer {
        calls: Mutex<usize>,
        value: f64,
    }

    impl PivotScorer for CountingScorer {
        fn score(&self, _input: &DecisionInput<'_>) -> Result<f64> {
            *self.calls.lock().unwrap() += 1;
            Ok(self.value)
        }

        fn id(&self) -> String {
            "counting".into()
        }
    }

    #[test]
    fn test_policy_consults_scorer_only_on_rejection() {
        let scorer = Arc::new(CountingScorer {
            calls: Mutex::new(0),
            value: 0.0,
        });
        let policy = PadPolicy::new(scorer.clone(), gate(0.7, 0.0));
        let d = Distribution::new(vec![0.5, 0.3, 0.2]).unwrap();
        let ctx = [TokenId(1)];
        // Accept prob = min(1, .3/.2) = 1: coin 0.9 still accepts.
        let input = decision_input(0.9, 0.3, 0.2, &d, &ctx);
        assert_eq!(policy.decide(&input).1, DecisionSource::SdAccept);
        assert_eq!(*scorer.calls.lock().unwrap(), 0);
        // Accept prob = .2/.4 = 0.5: coin 0.9 rejects, scorer fires, and the
        // low score flips the rejection.
        let input = decision_input(0.9, 0.2, 0.4, &d, &ctx);
        assert_eq!(policy.decide(&input), (Decision::Accept, DecisionSource::PadOverride));
        assert_eq!(*scorer.calls.lock().unwrap(), 1);
    }

    struct FailingScorer;

    impl PivotScorer for FailingScorer {
        fn score(&self, _input: &DecisionInput<'_>) -> Result<f64> {
            Err(CoreError::FeatureExtraction("scorer unavailable".into()))
        }

        fn id(&self) -> String {
            "failing".into()
        }
    }

    #[test]
    fn test_scorer_failure_keeps_rejection() {
        let policy = PadPolicy::new(Arc::new(FailingScorer), gate(0.99, 0.0));
        let d = Distribution::new(vec![0.5, 0.3, 0.2]).unwrap();
        let ctx = [TokenId(1)];
        let input = decision_input(0.9, 0.2, 0.4, &d, &ctx);
        assert_eq!(policy.decide(&input), (Decision::Reject, DecisionSource::SdReject));
    }

    #[test]
    fn test_wide_open_gate_accepts_every_position() {
        // sigma just below 1, zero floor, scorer that always says
        // "not a pivot": every rejection is overridden, so eta is exactly 1.
        let spec = SyntheticTaskSpec {
            vocab_size: 6,
            order: 1,
            perturbation: 0.6,
            hidden_dim: 4,
            seed: 50,
            utility: UtilityFn {
                rule: UtilityRule::Checksum { modulus: 6 },
                theta: 0.5,
            },
        };
        let (target, draft) = make_synthetic_pair(&spec).unwrap();
        let policy = PadPolicy::new(Arc::new(ConstScorer(0.0)), gate(0.999_999, 0.0));
        let dec = SpeculativeDecoder::new(
            Arc::new(target),
            Arc::new(draft),
            4,
            GenerationParams {
                max_len: 16,
                ..Default::default()
            },
            Arc::new(policy),
            "pad",
        );
        for i in 0..10 {
            let mut rng = stream_rng(20, "test-wide-open", i);
            let rec = dec.generate(&[TokenId(3)], &mut rng).unwrap();
            let (_, eta) = acceptance_stats(&rec.outcomes, 4).unwrap();
            assert_eq!(eta, 1.0);
        }
    }

    #[test]
    fn test_floor_violation_scan() {
        let mk = |source, p_target| AuditRecord {
            context_id: 0,
            block: 0,
            position: 0,
            token: TokenId(1),
            p_target,
            p_draft: 0.5,
            coin: 0.9,
            decision: if source == DecisionSource::SdReject {
                Decision::Reject
            } else {
                Decision::Accept
            },
            source,
        };
        let records = vec![
            mk(DecisionSource::PadOverride, 0.2),
            mk(DecisionSource::SdReject, 1e-9),
            mk(DecisionSource::PadOverride, 1e-5),
        ];
        assert_eq!(floor_violations(&records, 1e-4), 1);
        assert_eq!(floor_violations(&records, 0.0), 0);
    }
}
