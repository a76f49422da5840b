//! Record-and-replay for acceptance policies. A transcript pins down every
//! random choice of a standard speculative run — proposed tokens, both
//! probability tracks, verification coins — so alternative policies can be
//! scored on identical blocks. Because an override never consumes extra
//! randomness before the stop position, replayed acceptance counts are
//! directly comparable across policies: any gate can only extend the
//! standard run's accepted span, never shorten it.

use serde::{Deserialize, Serialize};

use crate::dist::{Distribution, GenerationParams, TokenId, EOS};
use crate::error::Result;
use crate::model::SequenceModel;
use crate::par::{map_indexed, stream_rng};
use crate::verify::{
    propose_block, verify_block_detailed, AcceptancePolicy, Decision, DecisionInput,
    PositionRecord, StandardPolicy,
};

/// One recorded verification block.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockTrace {
    pub context_id: u64,
    pub base_context: Vec<TokenId>,
    pub task_context_len: usize,
    pub tokens: Vec<TokenId>,
    pub draft_probs: Vec<f64>,
    /// Adjusted target distribution at each drafted position.
    pub target_dists: Vec<Distribution>,
    pub coins: Vec<f64>,
    /// Positions the standard coin rule accepted when the trace was recorded.
    pub sd_accepted_len: usize,
}

/// Runs standard speculative decoding over each context and keeps every
/// block's full verification state. Contexts get independent derived seeds
/// and may run in parallel; the result is ordered by context.
pub fn record_sd_transcript(
    target: &dyn SequenceModel,
    draft: &dyn SequenceModel,
    contexts: &[Vec<TokenId>],
    gamma: usize,
    params: &GenerationParams,
    seed: u64,
) -> Result<Vec<BlockTrace>> {
    params.validate()?;
    let per_context: Result<Vec<Vec<BlockTrace>>> = map_indexed(contexts.len(), |i| {
        record_one_context(target, draft, i as u64, &contexts[i], gamma, params, seed)
    })
    .into_iter()
    .collect();
    Ok(per_context?.into_iter().flatten().collect())
}

fn record_one_context(
    target: &dyn SequenceModel,
    draft: &dyn SequenceModel,
    context_id: u64,
    context: &[TokenId],
    gamma: usize,
    params: &GenerationParams,
    seed: u64,
) -> Result<Vec<BlockTrace>> {
    let mut rng = stream_rng(seed, "transcript", context_id);
    let mut full = context.to_vec();
    let mut emitted = 0usize;
    let mut traces = Vec::new();
    let policy = StandardPolicy;

    while emitted < params.max_len {
        let block_gamma = gamma.min(params.max_len - emitted);
        let mut block = propose_block(draft, &full, block_gamma, params, &mut rng)?;
        block.task_context_len = context.len();
        let detail = verify_block_detailed(target, &block, &policy, params, &mut rng)?;
        traces.push(BlockTrace {
            context_id,
            base_context: block.base_context.clone(),
            task_context_len: block.task_context_len,
            tokens: block.tokens.clone(),
            draft_probs: block.draft_probs.clone(),
            target_dists: detail.target_dists.clone(),
            coins: detail.coins.clone(),
            sd_accepted_len: detail.outcome.accepted_len,
        });
        let take = detail.outcome.emitted.len().min(params.max_len - emitted);
        full.extend_from_slice(&detail.outcome.emitted[..take]);
        emitted += take;
        if full.last() == Some(&EOS) {
            break;
        }
    }
    Ok(traces)
}

/// Re-decides one block under `policy`. Returns how many drafted positions
/// the policy accepts and the per-position records up to (and including) the
/// stopping rejection, if any.
pub fn replay_block(
    trace: &BlockTrace,
    policy: &dyn AcceptancePolicy,
) -> Result<(usize, Vec<PositionRecord>)> {
    let mut full = trace.base_context.clone();
    full.extend_from_slice(&trace.tokens);
    let base_len = trace.base_context.len();
    let mut accepted = 0usize;
    let mut records = Vec::new();
    for i in 0..trace.tokens.len() {
        let token = trace.tokens[i];
        let dist = &trace.target_dists[i];
        let input = DecisionInput {
            position: i,
            candidate: token,
            p_target: dist.prob(token),
            p_draft: trace.draft_probs[i],
            coin: trace.coins[i],
            context: &full[..base_len + i],
            task_context_len: trace.task_context_len,
            target_dist: dist,
        };
        let (decision, source) = policy.decide(&input);
        records.push(PositionRecord {
            position: i,
            token,
            p_target: input.p_target,
            p_draft: input.p_draft,
            coin: input.coin,
            decision,
            source,
        });
        if decision == Decision::Reject {
            break;
        }
        accepted += 1;
        if token == EOS {
            break;
        }
    }
    Ok((accepted, records))
}

/// Acceptance rate of `policy` across a transcript: accepted positions over
/// proposed positions.
pub fn replay_eta(traces: &[BlockTrace], policy: &dyn AcceptancePolicy) -> Result<f64> {
    let mut accepted = 0usize;
    let mut proposed = 0usize;
    for trace in traces {
        accepted += replay_block(trace, policy)?.0;
        proposed += trace.tokens.len();
    }
    if proposed == 0 {
        return Err(crate::error::CoreError::EmptyInput(
            "transcript has no proposed tokens".into(),
        ));
    }
    Ok(accepted as f64 / proposed as f64)
}

/// Convenience: records a transcript with the models of `decoder`-style setups
/// and replays it under several policies, returning one eta per policy in
/// input order.
pub fn replay_eta_sweep(
    traces: &[BlockTrace],
    policies: &[&dyn AcceptancePolicy],
) -> Result<Vec<f64>> {
    policies.iter().map(|p| replay_eta(traces, *p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    use crate::gate::{ConstScorer, GateConfig, PadPolicy};
    use crate::model::{make_synthetic_pair, sample_contexts, SyntheticTaskSpec};
    use crate::utility::{UtilityFn, UtilityRule};

    fn spec() -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            vocab_size: 6,
            order: 1,
            perturbation: 0.5,
            hidden_dim: 8,
            seed: 33,
            utility: UtilityFn {
                rule: UtilityRule::Checksum { modulus: 3 },
                theta: 0.5,
            },
        }
    }

    fn fixture() -> (Vec<BlockTrace>, GenerationParams) {
        let (target, draft) = make_synthetic_pair(&spec()).unwrap();
        let params = GenerationParams {
            max_len: 12,
            ..Default::default()
        };
        let contexts = sample_contexts(6, 20, 2, 77);
        let traces =
            record_sd_transcript(&target, &draft, &contexts, 4, &params, 501).unwrap();
        (traces, params)
    }

    #[test]
    fn test_replay_standard_matches_recorded_acceptance() {
        let (traces, _params) = fixture();
        assert!(!traces.is_empty());
        for trace in &traces {
            let (accepted, _) = replay_block(trace, &StandardPolicy).unwrap();
            assert_eq!(accepted, trace.sd_accepted_len);
        }
    }

    #[test]
    fn test_closed_gate_equals_standard() {
        // sigma = 0 means the override condition `score < 0` never holds.
        let (traces, _params) = fixture();
        let closed = PadPolicy::new(
            Arc::new(ConstScorer(0.0)),
            GateConfig {
                sigma: 0.0,
                ..Default::default()
            },
        );
        for trace in &traces {
            let (accepted, _) = replay_block(trace, &closed).unwrap();
            assert_eq!(accepted, trace.sd_accepted_len);
        }
    }

    #[test]
    fn test_any_gate_dominates_standard_per_block() {
        let (traces, _params) = fixture();
        let gate = PadPolicy::new(
            Arc::new(ConstScorer(0.2)),
            GateConfig {
                sigma: 0.5,
                ..Default::default()
            },
        );
        let mut extended = 0;
        for trace in &traces {
            let (accepted, _) = replay_block(trace, &gate).unwrap();
            assert!(accepted >= trace.sd_accepted_len);
            if accepted > trace.sd_accepted_len {
                extended += 1;
            }
        }
        assert!(extended > 0, "an open gate should extend some blocks");
    }

    #[test]
    fn test_eta_monotone_in_sigma_for_const_scores() {
        let (traces, _params) = fixture();
        // A constant mid score makes the sweep a step function around it.
        let mk = |sigma: f64| {
            PadPolicy::new(
                Arc::new(ConstScorer(0.4)),
                GateConfig {
                    sigma,
                    ..Default::default()
                },
            )
        };
        let low = replay_eta(&traces, &mk(0.3)).unwrap();
        let mid = replay_eta(&traces, &mk(0.5)).unwrap();
        let sd = replay_eta(&traces, &StandardPolicy).unwrap();
        assert_eq!(low, sd, "score 0.4 is not below sigma 0.3");
        assert!(mid > low, "score 0.4 clears sigma 0.5 and must extend runs");
    }

    #[test]
    fn test_replay_stops_at_accepted_eos() {
        // Hand-built trace: EOS accepted at position 0 must end the block
        // even though a second drafted token follows.
        let d = Distribution::new(vec![0.5, 0.25, 0.25]).unwrap();
        let trace = BlockTrace {
            context_id: 0,
            base_context: vec![TokenId(1)],
            task_context_len: 1,
            tokens: vec![EOS, TokenId(1)],
            draft_probs: vec![0.5, 0.25],
            target_dists: vec![d.clone(), d.clone()],
            coins: vec![0.0, 0.0],
            sd_accepted_len: 1,
        };
        let (accepted, records) = replay_block(&trace, &StandardPolicy).unwrap();
        assert_eq!(accepted, 1);
        assert_eq!(records.len(), 1);
    }

    #[test]
    fn test_transcript_is_deterministic() {
        let (a, _) = fixture();
        let (b, _) = fixture();
        let ser = |t: &[BlockTrace]| serde_json::to_string(t).unwrap();
        assert_eq!(ser(&a), ser(&b));
    }
}
