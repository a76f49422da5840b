//! Draft-and-verify machinery: block proposal by the draft model, parallel
//! verification by the target model, and the per-position accept/reject
//! bookkeeping shared by every acceptance policy.
//!
//! The standard policy accepts a drafted token with probability
//! `min(1, p_target / p_draft)` and, on rejection, resamples from the
//! positive part of `p_target - p_draft`. That combination reproduces the
//! target distribution exactly at every position, which
//! [`per_token_output_distribution`] states in closed form and the tests
//! check. Alternative policies (the pivot gate) plug in through
//! [`AcceptancePolicy`] and may only relax rejections.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dist::{adjust_distribution, Distribution, GenerationParams, TokenId, EOS};
use crate::error::{CoreError, Result};
use crate::model::SequenceModel;

/// Default number of drafted tokens per block.
pub const DEFAULT_GAMMA: usize = 10;

// ---------------------------------------------------------------------------
// Decisions
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Decision {
    Accept,
    Reject,
}

/// Which rule produced a decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecisionSource {
    /// Accepted by the standard coin flip.
    SdAccept,
    /// Rejected by the coin flip and left rejected.
    SdReject,
    /// Rejected by the coin flip, then accepted by the pivot gate.
    PadOverride,
}

/// Everything a policy may look at when ruling on one drafted token.
/// Policies get no RNG on purpose: the decision must be a pure function of
/// this input, so a run can be replayed under a different policy.
#[derive(Debug)]
pub struct DecisionInput<'a> {
    /// Position within the block, 0-based.
    pub position: usize,
    pub candidate: TokenId,
    /// Adjusted target probability of the candidate.
    pub p_target: f64,
    /// Adjusted draft probability of the candidate.
    pub p_draft: f64,
    /// The uniform draw in [0, 1) for this position.
    pub coin: f64,
    /// Full conditioning sequence: task context, prior output, and the
    /// accepted part of the current block.
    pub context: &'a [TokenId],
    /// How many leading tokens of `context` are the task context.
    pub task_context_len: usize,
    /// Adjusted target distribution at this position.
    pub target_dist: &'a Distribution,
}

/// Per-token accept/reject arbiter.
///
/// Contract: when `coin < accept_probability(p_target, p_draft)` the policy
/// must accept (standard acceptances are never taken away); policies may
/// only differ on coin-rejected tokens.
pub trait AcceptancePolicy: Send + Sync {
    fn decide(&self, input: &DecisionInput<'_>) -> (Decision, DecisionSource);

    /// Whether rejections consult a learned scorer (drives the per-rejection
    /// cost term in the latency model).
    fn consults_classifier(&self) -> bool {
        false
    }
}

/// The distribution-preserving baseline rule.
#[derive(Debug, Clone, Copy, Default)]
pub struct StandardPolicy;

impl AcceptancePolicy for StandardPolicy {
    fn decide(&self, input: &DecisionInput<'_>) -> (Decision, DecisionSource) {
        if input.coin < accept_probability(input.p_target, input.p_draft) {
            (Decision::Accept, DecisionSource::SdAccept)
        } else {
            (Decision::Reject, DecisionSource::SdReject)
        }
    }
}

// ---------------------------------------------------------------------------
// Core quantities
// ---------------------------------------------------------------------------

/// `min(1, p_target / p_draft)`. A zero draft probability cannot occur for a
/// token the draft actually sampled; if it does, the ratio is +inf and the
/// token is accepted outright.
pub fn accept_probability(p_target: f64, p_draft: f64) -> f64 {
    debug_assert!(p_draft >= 0.0 && p_target >= 0.0);
    (p_target / p_draft).min(1.0)
}

/// Normalized positive part of `p_target - p_draft`: the distribution a
/// rejected position resamples from. Errors when the two distributions are
/// identical (zero rejection mass) — unreachable from a genuine rejection.
pub fn residual_distribution(
    p_target: &Distribution,
    p_draft: &Distribution,
) -> Result<Distribution> {
    assert_eq!(
        p_target.vocab_size(),
        p_draft.vocab_size(),
        "residual needs matching vocabularies"
    );
    let weights: Vec<f64> = p_target
        .probs()
        .iter()
        .zip(p_draft.probs())
        .map(|(&t, &d)| (t - d).max(0.0))
        .collect();
    if weights.iter().sum::<f64>() <= 0.0 {
        return Err(CoreError::DegenerateResidual);
    }
    Distribution::from_weights(weights)
}

/// Closed-form law of the token emitted at one position under the standard
/// rule: `min(p_t, p_d) + P(reject) * residual`. Algebraically this equals
/// the target distribution; computing it the long way gives the tests an
/// independent route to that identity.
pub fn per_token_output_distribution(
    p_target: &Distribution,
    p_draft: &Distribution,
) -> Distribution {
    assert_eq!(
        p_target.vocab_size(),
        p_draft.vocab_size(),
        "output law needs matching vocabularies"
    );
    let mins: Vec<f64> = p_target
        .probs()
        .iter()
        .zip(p_draft.probs())
        .map(|(&t, &d)| t.min(d))
        .collect();
    let reject_mass = 1.0 - mins.iter().sum::<f64>();
    if reject_mass <= 0.0 {
        // Identical distributions: nothing ever gets rejected.
        return p_target.clone();
    }
    let residual = residual_distribution(p_target, p_draft)
        .expect("positive rejection mass implies a nonempty residual");
    let probs: Vec<f64> = mins
        .iter()
        .zip(residual.probs())
        .map(|(&m, &r)| m + reject_mass * r)
        .collect();
    Distribution::new(probs).expect("min + reject_mass * residual sums to one")
}

// ---------------------------------------------------------------------------
// Blocks
// ---------------------------------------------------------------------------

/// A drafted block awaiting verification, with the adjusted draft
/// distributions it was sampled from (rejection needs them).
#[derive(Debug, Clone)]
pub struct DraftBlock {
    /// The sequence the block continues (task context plus prior output).
    pub base_context: Vec<TokenId>,
    /// Length of the task-context prefix inside `base_context`.
    pub task_context_len: usize,
    pub tokens: Vec<TokenId>,
    /// Adjusted draft probability of each drafted token.
    pub draft_probs: Vec<f64>,
    /// Adjusted draft distribution at each position.
    pub draft_dists: Vec<Distribution>,
}

/// Samples up to `gamma` tokens from the draft model, stopping after EOS.
pub fn propose_block(
    draft: &dyn SequenceModel,
    context: &[TokenId],
    gamma: usize,
    params: &GenerationParams,
    rng: &mut ChaCha8Rng,
) -> Result<DraftBlock> {
    if gamma == 0 {
        return Err(CoreError::InvalidConfig("gamma must be positive".into()));
    }
    let mut seq = context.to_vec();
    let mut tokens = Vec::with_capacity(gamma);
    let mut draft_probs = Vec::with_capacity(gamma);
    let mut draft_dists = Vec::with_capacity(gamma);
    for _ in 0..gamma {
        let d = adjust_distribution(&draft.next_distribution(&seq)?, params);
        let t = d.sample(rng);
        tokens.push(t);
        draft_probs.push(d.prob(t));
        draft_dists.push(d);
        seq.push(t);
        if t == EOS {
            break;
        }
    }
    Ok(DraftBlock {
        base_context: context.to_vec(),
        task_context_len: context.len(),
        tokens,
        draft_probs,
        draft_dists,
    })
}

/// One per-position decision, as recorded for audits and replays.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionRecord {
    pub position: usize,
    pub token: TokenId,
    pub p_target: f64,
    pub p_draft: f64,
    pub coin: f64,
    pub decision: Decision,
    pub source: DecisionSource,
}

/// Flat, serializable form of a [`PositionRecord`] tagged with which context
/// and block it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub context_id: u64,
    pub block: u64,
    pub position: usize,
    pub token: TokenId,
    pub p_target: f64,
    pub p_draft: f64,
    pub coin: f64,
    pub decision: Decision,
    pub source: DecisionSource,
}

impl AuditRecord {
    pub fn from_position(context_id: u64, block: u64, r: &PositionRecord) -> Self {
        Self {
            context_id,
            block,
            position: r.position,
            token: r.token,
            p_target: r.p_target,
            p_draft: r.p_draft,
            coin: r.coin,
            decision: r.decision,
            source: r.source,
        }
    }
}

/// Result of verifying one block.
#[derive(Debug, Clone)]
pub struct VerifyOutcome {
    /// Tokens the block contributes to the output: the accepted prefix plus
    /// either a rejection resample or a bonus token (never both).
    pub emitted: Vec<TokenId>,
    /// Drafted tokens accepted before the first rejection (or all of them).
    pub accepted_len: usize,
    /// Length of the drafted block.
    pub proposed_len: usize,
    /// True when every drafted token was accepted and the free token sampled
    /// after the block was emitted.
    pub got_bonus: bool,
    pub records: Vec<PositionRecord>,
}

/// [`verify_block`] plus the intermediate quantities a replay needs.
#[derive(Debug, Clone)]
pub struct VerifyDetail {
    pub outcome: VerifyOutcome,
    /// Adjusted target distribution at every drafted position (computed for
    /// the full block, as the parallel verification pass would).
    pub target_dists: Vec<Distribution>,
    pub coins: Vec<f64>,
}

/// Verifies a drafted block against the target model under a policy.
///
/// RNG discipline, fixed so paired runs stay comparable: exactly
/// `proposed_len` coins are drawn first (in position order), then at most one
/// extra draw for the rejection resample or the bonus token.
pub fn verify_block_detailed(
    target: &dyn SequenceModel,
    block: &DraftBlock,
    policy: &dyn AcceptancePolicy,
    params: &GenerationParams,
    rng: &mut ChaCha8Rng,
) -> Result<VerifyDetail> {
    let g = block.tokens.len();
    if g == 0 {
        return Err(CoreError::EmptyInput("cannot verify an empty block".into()));
    }
    debug_assert_eq!(block.draft_probs.len(), g);
    debug_assert_eq!(block.draft_dists.len(), g);

    // The "parallel pass": target distributions at every drafted position,
    // conditioning on the draft's tokens regardless of later decisions.
    let base_len = block.base_context.len();
    let mut seq = block.base_context.clone();
    seq.extend_from_slice(&block.tokens);
    let mut target_dists = Vec::with_capacity(g);
    for i in 0..g {
        let d = target.next_distribution(&seq[..base_len + i])?;
        target_dists.push(adjust_distribution(&d, params));
    }

    let coins: Vec<f64> = (0..g).map(|_| rng.random()).collect();

    let mut records = Vec::with_capacity(g);
    let mut accepted = 0usize;
    let mut rejected_at = None;
    let mut ended_at_eos = false;
    for i in 0..g {
        let token = block.tokens[i];
        let input = DecisionInput {
            position: i,
            candidate: token,
            p_target: target_dists[i].prob(token),
            p_draft: block.draft_probs[i],
            coin: coins[i],
            context: &seq[..base_len + i],
            task_context_len: block.task_context_len,
            target_dist: &target_dists[i],
        };
        let (decision, source) = policy.decide(&input);
        records.push(PositionRecord {
            position: i,
            token,
            p_target: input.p_target,
            p_draft: input.p_draft,
            coin: coins[i],
            decision,
            source,
        });
        match decision {
            Decision::Accept => {
                accepted += 1;
                if token == EOS {
                    ended_at_eos = true;
                    break;
                }
            }
            Decision::Reject => {
                rejected_at = Some(i);
                break;
            }
        }
    }

    let mut emitted = block.tokens[..accepted].to_vec();
    let mut got_bonus = false;
    if let Some(i) = rejected_at {
        let residual = residual_distribution(&target_dists[i], &block.draft_dists[i])?;
        emitted.push(residual.sample(rng));
    } else if !ended_at_eos {
        // Full acceptance: the verification pass already paid for the next
        // target distribution, so emit a free token from it.
        let d = target.next_distribution(&seq)?;
        emitted.push(adjust_distribution(&d, params).sample(rng));
        got_bonus = true;
    }

    Ok(VerifyDetail {
        outcome: VerifyOutcome {
            emitted,
            accepted_len: accepted,
            proposed_len: g,
            got_bonus,
            records,
        },
        target_dists,
        coins,
    })
}

/// Verifies a drafted block; see [`verify_block_detailed`] for the variant
/// that also exposes the per-position distributions and coins.
pub fn verify_block(
    target: &dyn SequenceModel,
    block: &DraftBlock,
    policy: &dyn AcceptancePolicy,
    params: &GenerationParams,
    rng: &mut ChaCha8Rng,
) -> Result<VerifyOutcome> {
    verify_block_detailed(target, block, policy, params, rng).map(|d| d.outcome)
}

// ---------------------------------------------------------------------------
// Aggregate statistics
// ---------------------------------------------------------------------------

/// Mean accepted block length `tau` and acceptance rate `eta` over a batch of
/// outcomes. `eta` is total accepted over total proposed, so blocks cut short
/// by EOS or the output budget still aggregate sensibly; `tau = gamma * eta`
/// is the full-block equivalent.
pub fn acceptance_stats(outcomes: &[VerifyOutcome], gamma: usize) -> Result<(f64, f64)> {
    if gamma == 0 {
        return Err(CoreError::InvalidConfig("gamma must be positive".into()));
    }
    let proposed: usize = outcomes.iter().map(|o| o.proposed_len).sum();
    if proposed == 0 {
        return Err(CoreError::EmptyInput("no verified blocks".into()));
    }
    let accepted: usize = outcomes.iter().map(|o| o.accepted_len).sum();
    let eta = accepted as f64 / proposed as f64;
    Ok((gamma as f64 * eta, eta))
}
