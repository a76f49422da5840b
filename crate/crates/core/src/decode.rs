//! End-to-end decoding loops: plain autoregressive decoding with either
//! model, and block-wise draft/verify decoding under a pluggable acceptance
//! policy. Each decoder also tallies the abstract work it performed (draft
//! steps, target passes, scored rejections) for the latency model.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::dist::{GenerationParams, TokenId, EOS};
use crate::error::Result;
use crate::model::{rollout, SequenceModel};
use crate::verify::{propose_block, verify_block, AcceptancePolicy, DecisionSource, VerifyOutcome};

/// One generation plus its work counters.
#[derive(Debug, Clone)]
pub struct GenerationRecord {
    /// Output tokens (task context excluded), at most `max_len` long.
    pub output: Vec<TokenId>,
    /// Block-level outcomes; empty for non-speculative decoders.
    pub outcomes: Vec<VerifyOutcome>,
    /// Draft-model forward passes (one per drafted token).
    pub draft_steps: u64,
    /// Target-model passes: one per verified block, or one per token for
    /// plain target decoding.
    pub target_passes: u64,
    /// Coin rejections that consulted a learned scorer.
    pub scored_rejections: u64,
}

/// A complete decoding strategy over a fixed model pair and settings.
pub trait Decoder: Send + Sync {
    fn id(&self) -> &str;
    fn generate(&self, context: &[TokenId], rng: &mut ChaCha8Rng) -> Result<GenerationRecord>;
}

/// Plain sampling from the target model; the quality reference.
pub struct TargetDecoder {
    pub model: Arc<dyn SequenceModel>,
    pub params: GenerationParams,
}

impl Decoder for TargetDecoder {
    fn id(&self) -> &str {
        "target"
    }

    fn generate(&self, context: &[TokenId], rng: &mut ChaCha8Rng) -> Result<GenerationRecord> {
        let output = rollout(self.model.as_ref(), context, &self.params, rng)?;
        let target_passes = output.len() as u64;
        Ok(GenerationRecord {
            output,
            outcomes: Vec::new(),
            draft_steps: 0,
            target_passes,
            scored_rejections: 0,
        })
    }
}

/// Plain sampling from the draft model; the speed ceiling.
pub struct DraftDecoder {
    pub model: Arc<dyn SequenceModel>,
    pub params: GenerationParams,
}

impl Decoder for DraftDecoder {
    fn id(&self) -> &str {
        "draft"
    }

    fn generate(&self, context: &[TokenId], rng: &mut ChaCha8Rng) -> Result<GenerationRecord> {
        let output = rollout(self.model.as_ref(), context, &self.params, rng)?;
        let draft_steps = output.len() as u64;
        Ok(GenerationRecord {
            output,
            outcomes: Vec::new(),
            draft_steps,
            target_passes: 0,
            scored_rejections: 0,
        })
    }
}

/// Draft-and-verify decoding under an acceptance policy.
pub struct SpeculativeDecoder {
    pub target: Arc<dyn SequenceModel>,
    pub draft: Arc<dyn SequenceModel>,
    pub gamma: usize,
    pub params: GenerationParams,
    pub policy: Arc<dyn AcceptancePolicy>,
    id: String,
}

impl SpeculativeDecoder {
    pub fn new(
        target: Arc<dyn SequenceModel>,
        draft: Arc<dyn SequenceModel>,
        gamma: usize,
        params: GenerationParams,
        policy: Arc<dyn AcceptancePolicy>,
        id: impl Into<String>,
    ) -> Self {
        Self {
            target,
            draft,
            gamma,
            params,
            policy,
            id: id.into(),
        }
    }
}

impl Decoder for SpeculativeDecoder {
    fn id(&self) -> &str {
        &self.id
    }

    /// Blocks are truncated to the remaining output budget before drafting,
    /// and a bonus token that would overshoot the budget is dropped. Every
    /// block makes progress (at least one emitted token), so the loop always
    /// terminates.
    fn generate(&self, context: &[TokenId], rng: &mut ChaCha8Rng) -> Result<GenerationRecord> {
        let mut output: Vec<TokenId> = Vec::new();
        let mut outcomes = Vec::new();
        let mut draft_steps = 0u64;
        let mut target_passes = 0u64;
        let mut scored_rejections = 0u64;
        let scoring = self.policy.consults_classifier();

        while output.len() < self.params.max_len {
            let remaining = self.params.max_len - output.len();
            let mut seq = context.to_vec();
            seq.extend_from_slice(&output);
            let mut block = propose_block(
                self.draft.as_ref(),
                &seq,
                self.gamma.min(remaining),
                &self.params,
                rng,
            )?;
            block.task_context_len = context.len();
            draft_steps += block.tokens.len() as u64;

            let outcome = verify_block(
                self.target.as_ref(),
                &block,
                self.policy.as_ref(),
                &self.params,
                rng,
            )?;
            target_passes += 1;
            if scoring {
                scored_rejections += outcome
                    .records
                    .iter()
                    .filter(|r| r.source != DecisionSource::SdAccept)
                    .count() as u64;
            }
            output.extend(outcome.emitted.iter().take(remaining));
            outcomes.push(outcome);
            if output.last() == Some(&EOS) {
                break;
            }
        }
        Ok(GenerationRecord {
            output,
            outcomes,
            draft_steps,
            target_passes,
            scored_rejections,
        })
    }
}
