//! Pivot-label harvesting: walk contexts token by token with the draft
//! proposing and the target's coin rule deciding, and every rejected
//! candidate becomes a training sample. The label compares estimated
//! expected utility with and without the candidate; a deterministic judge
//! can overrule optimistic non-pivot labels after inspecting a
//! representative successful continuation.
//!
//! After a non-pivot the walk keeps the candidate (the state a gate override
//! would reach); after a pivot it resamples from the rejection residual (the
//! state standard rejection would reach). EOS or the output budget ends a
//! walk.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{features_from_dist, FeatureVector, TrainSample};
use crate::dist::{adjust_distribution, GenerationParams, TokenId, EOS};
use crate::error::{CoreError, Result};
use crate::format::{write_jsonl, FileHeader, LABELS_SCHEMA};
use crate::model::SequenceModel;
use crate::par::{map_indexed, stream_rng};
use crate::utility::{
    enumerable, exact_expected_utility, rollout_batch, RolloutEstimate, RolloutRecord, UtilityFn,
};
use crate::verify::{
    accept_probability, residual_distribution, AuditRecord, Decision, DecisionSource,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Label {
    Pivot,
    NonPivot,
}

/// Pipeline settings.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LabelConfig {
    /// Tolerance factor: the candidate is a pivot when its estimated utility
    /// falls strictly below `alpha` times the baseline estimate.
    pub alpha: f64,
    /// Rollouts per utility estimate.
    pub n_rollouts: usize,
    /// Maximum walk steps (draft proposals) per context.
    pub max_steps: usize,
    /// Optional cap on harvested samples per context; hitting it truncates
    /// that context's walk and is reported explicitly.
    pub max_samples_per_context: Option<usize>,
    /// Replace rollout estimates with exact enumeration whenever the
    /// remaining outcome space is small enough.
    pub exact_when_enumerable: bool,
    pub params: GenerationParams,
    pub seed: u64,
}

impl Default for LabelConfig {
    fn default() -> Self {
        Self {
            alpha: 0.8,
            n_rollouts: 8,
            max_steps: 24,
            max_samples_per_context: None,
            exact_when_enumerable: true,
            params: GenerationParams::default(),
            seed: 0,
        }
    }
}

impl LabelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(CoreError::InvalidConfig(format!(
                "alpha must lie in (0, 1], got {}",
                self.alpha
            )));
        }
        if self.n_rollouts == 0 {
            return Err(CoreError::InvalidConfig("n_rollouts must be positive".into()));
        }
        if self.max_steps == 0 {
            return Err(CoreError::InvalidConfig("max_steps must be positive".into()));
        }
        if self.max_samples_per_context == Some(0) {
            return Err(CoreError::InvalidConfig(
                "max_samples_per_context must be positive when set".into(),
            ));
        }
        self.params.validate()
    }
}

/// One harvested training sample.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub context_id: u64,
    /// Output tokens committed before the candidate.
    pub prefix: Vec<TokenId>,
    pub candidate: TokenId,
    pub u_base_hat: f64,
    pub u_cand_hat: f64,
    pub label: Label,
    pub judge_flipped: bool,
    pub features: FeatureVector,
}

impl LabeledSample {
    pub fn to_train_sample(&self) -> TrainSample {
        TrainSample {
            features: self.features.clone(),
            pivot: self.label == Label::Pivot,
        }
    }
}

// ---------------------------------------------------------------------------
// Label rule
// ---------------------------------------------------------------------------

/// Pivot iff `u_cand < alpha * u_base` (strictly). A zero baseline can never
/// pivot: there is no utility left to lose.
pub fn label_rule_means(u_base: f64, u_cand: f64, alpha: f64) -> Label {
    if u_cand < alpha * u_base {
        Label::Pivot
    } else {
        Label::NonPivot
    }
}

/// [`label_rule_means`] over rollout estimates.
pub fn label_rule(u_base: &RolloutEstimate, u_cand: &RolloutEstimate, alpha: f64) -> Label {
    label_rule_means(u_base.mean, u_cand.mean, alpha)
}

// ---------------------------------------------------------------------------
// Judge
// ---------------------------------------------------------------------------

/// Soundness check on a complete output. Stands in for an external judge
/// model; implementations must be deterministic.
pub trait Judge: Send + Sync {
    fn is_sound(&self, context: &[TokenId], output: &[TokenId]) -> Result<bool>;
}

/// Accepts everything; disables the judge stage.
#[derive(Debug, Clone, Copy, Default)]
pub struct NullJudge;

impl Judge for NullJudge {
    fn is_sound(&self, _context: &[TokenId], _output: &[TokenId]) -> Result<bool> {
        Ok(true)
    }
}

/// Rule-based soundness heuristics matched to the utility rules:
///
/// * checksum: an output that already hit the required residue, kept going,
///   and still ended successful took a detour — unsound;
/// * substring: an occurrence of the pattern's first token *not* followed by
///   the second, before the pattern finally lands, is a false start —
///   unsound.
#[derive(Debug, Clone)]
pub struct RuleJudge {
    pub rule: crate::utility::UtilityRule,
}

impl Judge for RuleJudge {
    fn is_sound(&self, context: &[TokenId], output: &[TokenId]) -> Result<bool> {
        use crate::utility::UtilityRule;
        let body_len = output.iter().position(|&t| t == EOS).unwrap_or(output.len());
        let body = &output[..body_len];
        match self.rule {
            UtilityRule::Checksum { modulus } => {
                let m = modulus as u64;
                let want = context.iter().map(|t| u64::from(t.0)).sum::<u64>() % m;
                let total = body.iter().map(|t| u64::from(t.0)).sum::<u64>() % m;
                if total != want {
                    return Ok(true); // failures are judged elsewhere
                }
                let mut run = 0u64;
                for (i, t) in body.iter().enumerate() {
                    run = (run + u64::from(t.0)) % m;
                    if run == want && i + 1 < body.len() {
                        return Ok(false); // was already done, kept going
                    }
                }
                Ok(true)
            }
            UtilityRule::Substring { first, second } => {
                let hit = body.windows(2).position(|w| w[0] == first && w[1] == second);
                let Some(hit) = hit else {
                    return Ok(true);
                };
                for i in 0..hit {
                    if body[i] == first && body.get(i + 1) != Some(&second) {
                        return Ok(false); // false start before the real match
                    }
                }
                Ok(true)
            }
        }
    }
}

/// Successful rollout of lower-median length: sort the successes by
/// continuation length (stable) and take the lower middle one.
pub fn select_representative(rollouts: &[RolloutRecord]) -> Option<&RolloutRecord> {
    let mut successes: Vec<&RolloutRecord> = rollouts.iter().filter(|r| r.success).collect();
    if successes.is_empty() {
        return None;
    }
    successes.sort_by_key(|r| r.tokens.len());
    Some(successes[(successes.len() - 1) / 2])
}

/// Applies the judge to a provisional label. Only non-pivot labels can flip
/// (an unsound success is evidence *against* the candidate); with no
/// successful rollout to inspect, the judge abstains.
pub fn judge_check(
    label: Label,
    rollouts: &[RolloutRecord],
    context: &[TokenId],
    output_prefix: &[TokenId],
    judge: &dyn Judge,
) -> Result<(Label, bool)> {
    if label == Label::Pivot {
        return Ok((Label::Pivot, false));
    }
    let Some(rep) = select_representative(rollouts) else {
        return Ok((label, false));
    };
    let mut output = output_prefix.to_vec();
    output.extend_from_slice(&rep.tokens);
    if judge.is_sound(context, &output)? {
        Ok((Label::NonPivot, false))
    } else {
        Ok((Label::Pivot, true))
    }
}

// ---------------------------------------------------------------------------
// Harvest
// ---------------------------------------------------------------------------

/// Output of a harvest run.
#[derive(Debug, Clone)]
pub struct HarvestResult {
    pub samples: Vec<LabeledSample>,
    /// One record per walk step (accepted or rejected), for auditing.
    pub audit: Vec<AuditRecord>,
    /// Contexts whose walk hit the per-context sample cap.
    pub truncated_contexts: usize,
}

impl HarvestResult {
    pub fn pivots(&self) -> usize {
        self.samples
            .iter()
            .filter(|s| s.label == Label::Pivot)
            .count()
    }

    pub fn rejections(&self) -> usize {
        self.audit
            .iter()
            .filter(|r| r.decision == Decision::Reject)
            .count()
    }
}

struct ContextHarvest {
    samples: Vec<LabeledSample>,
    audit: Vec<AuditRecord>,
    truncated: bool,
}

/// Walks every context and labels each rejected candidate. Contexts are
/// processed independently (in parallel when enabled) with per-context
/// derived seeds; output order is context order regardless of scheduling.
pub fn harvest_and_label(
    target: &dyn SequenceModel,
    draft: &dyn SequenceModel,
    contexts: &[Vec<TokenId>],
    utility: &UtilityFn,
    cfg: &LabelConfig,
    judge: &dyn Judge,
) -> Result<HarvestResult> {
    cfg.validate()?;
    utility.validate(target.vocab_size())?;
    let per_context: Result<Vec<ContextHarvest>> = map_indexed(contexts.len(), |i| {
        harvest_one_context(target, draft, i as u64, &contexts[i], utility, cfg, judge)
    })
    .into_iter()
    .collect();

    let mut result = HarvestResult {
        samples: Vec::new(),
        audit: Vec::new(),
        truncated_contexts: 0,
    };
    for ch in per_context? {
        result.samples.extend(ch.samples);
        result.audit.extend(ch.audit);
        if ch.truncated {
            result.truncated_contexts += 1;
        }
    }
    debug_assert_eq!(result.samples.len(), result.rejections());
    Ok(result)
}

fn harvest_one_context(
    target: &dyn SequenceModel,
    draft: &dyn SequenceModel,
    context_id: u64,
    context: &[TokenId],
    utility: &UtilityFn,
    cfg: &LabelConfig,
    judge: &dyn Judge,
) -> Result<ContextHarvest> {
    let mut rng = stream_rng(cfg.seed, "harvest", context_id);
    let mut prefix: Vec<TokenId> = Vec::new();
    let mut out = ContextHarvest {
        samples: Vec::new(),
        audit: Vec::new(),
        truncated: false,
    };

    for step in 0..cfg.max_steps {
        if prefix.len() >= cfg.params.max_len || prefix.last() == Some(&EOS) {
            break;
        }
        let mut full = context.to_vec();
        full.extend_from_slice(&prefix);

        let q = adjust_distribution(&draft.next_distribution(&full)?, &cfg.params);
        let candidate = q.sample(&mut rng);
        let p = adjust_distribution(&target.next_distribution(&full)?, &cfg.params);
        let p_target = p.prob(candidate);
        let p_draft = q.prob(candidate);
        let coin: f64 = rng.random();
        let accepted = coin < accept_probability(p_target, p_draft);

        out.audit.push(AuditRecord {
            context_id,
            block: step as u64,
            position: 0,
            token: candidate,
            p_target,
            p_draft,
            coin,
            decision: if accepted {
                Decision::Accept
            } else {
                Decision::Reject
            },
            source: if accepted {
                DecisionSource::SdAccept
            } else {
                DecisionSource::SdReject
            },
        });

        if accepted {
            prefix.push(candidate);
            continue;
        }

        // A rejected candidate: estimate utility with and without it.
        let mut with_cand = prefix.clone();
        with_cand.push(candidate);
        let budget = cfg.params.max_len - prefix.len();
        let exact = cfg.exact_when_enumerable && enumerable(target.vocab_size(), budget);
        let (u_base_hat, u_cand_hat, cand_rollouts) = if exact {
            (
                exact_expected_utility(target, context, &prefix, utility, &cfg.params)?,
                exact_expected_utility(target, context, &with_cand, utility, &cfg.params)?,
                Vec::new(),
            )
        } else {
            let (base_est, _) = rollout_batch(
                target,
                context,
                &prefix,
                utility,
                cfg.n_rollouts,
                &cfg.params,
                &mut rng,
            )?;
            let (cand_est, rolls) = rollout_batch(
                target,
                context,
                &with_cand,
                utility,
                cfg.n_rollouts,
                &cfg.params,
                &mut rng,
            )?;
            (base_est.mean, cand_est.mean, rolls)
        };

        let mut label = label_rule_means(u_base_hat, u_cand_hat, cfg.alpha);
        let mut judge_flipped = false;
        if label == Label::NonPivot {
            // Exact estimates come with no rollouts; sample some so the
            // judge still has a representative to read.
            let rolls = if exact {
                rollout_batch(
                    target,
                    context,
                    &with_cand,
                    utility,
                    cfg.n_rollouts,
                    &cfg.params,
                    &mut rng,
                )?
                .1
            } else {
                cand_rollouts
            };
            (label, judge_flipped) = judge_check(label, &rolls, context, &with_cand, judge)?;
        }

        let features = features_from_dist(target, &full, candidate, &p)?;
        out.samples.push(LabeledSample {
            context_id,
            prefix: prefix.clone(),
            candidate,
            u_base_hat,
            u_cand_hat,
            label,
            judge_flipped,
            features,
        });
        if let Some(cap) = cfg.max_samples_per_context {
            if out.samples.len() >= cap {
                out.truncated = true;
                break;
            }
        }

        // Advance the walk along the branch the label implies.
        match label {
            Label::NonPivot => prefix.push(candidate),
            Label::Pivot => {
                let residual = residual_distribution(&p, &q)?;
                prefix.push(residual.sample(&mut rng));
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

/// On-disk row; field order is part of the format.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct LabelRow {
    context_id: u64,
    prefix_len: usize,
    prefix_tokens: Vec<TokenId>,
    candidate: TokenId,
    u_base_hat: f64,
    u_cand_hat: f64,
    label: Label,
    judge_flipped: bool,
    feature_vector: FeatureVector,
}

/// Final line of a labels file: totals for cross-checking, plus the explicit
/// truncation marker.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelTrailer {
    pub samples: usize,
    pub truncated_contexts: usize,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum LabelLine {
    Row(Box<LabelRow>),
    Trailer(LabelTrailer),
}

/// Writes a labels file: header, one row per sample, then the trailer.
pub fn write_labels<W: std::io::Write>(
    w: &mut W,
    header: &FileHeader,
    result: &HarvestResult,
) -> Result<()> {
    let rows = result.samples.iter().map(|s| LabelRow {
        context_id: s.context_id,
        prefix_len: s.prefix.len(),
        prefix_tokens: s.prefix.clone(),
        candidate: s.candidate,
        u_base_hat: s.u_base_hat,
        u_cand_hat: s.u_cand_hat,
        label: s.label,
        judge_flipped: s.judge_flipped,
        feature_vector: s.features.clone(),
    });
    let trailer = LabelTrailer {
        samples: result.samples.len(),
        truncated_contexts: result.truncated_contexts,
    };
    write_jsonl(
        w,
        header,
        rows.map(|r| serde_json::to_value(r).expect("label rows serialize"))
            .chain(std::iter::once(
                serde_json::to_value(&trailer).expect("trailer serializes"),
            )),
    )
}

/// Reads a labels file, validating the trailer count and per-row
/// `prefix_len` consistency.
pub fn read_labels<R: std::io::BufRead>(
    r: R,
) -> Result<(FileHeader, Vec<LabeledSample>, LabelTrailer)> {
    let (header, lines): (FileHeader, Vec<serde_json::Value>) =
        crate::format::read_jsonl(r, LABELS_SCHEMA)?;
    let mut samples = Vec::new();
    let mut trailer = None;
    for (i, line) in lines.iter().enumerate() {
        let parsed: LabelLine = serde_json::from_value(line.clone())?;
        match parsed {
            LabelLine::Row(row) => {
                if trailer.is_some() {
                    return Err(CoreError::MalformedFile(
                        "data row after the trailer".into(),
                    ));
                }
                if row.prefix_len != row.prefix_tokens.len() {
                    return Err(CoreError::MalformedFile(format!(
                        "row {i}: prefix_len {} does not match {} tokens",
                        row.prefix_len,
                        row.prefix_tokens.len()
                    )));
                }
                samples.push(LabeledSample {
                    context_id: row.context_id,
                    prefix: row.prefix_tokens,
                    candidate: row.candidate,
                    u_base_hat: row.u_base_hat,
                    u_cand_hat: row.u_cand_hat,
                    label: row.label,
                    judge_flipped: row.judge_flipped,
                    features: row.feature_vector,
                });
            }
            LabelLine::Trailer(t) => trailer = Some(t),
        }
    }
    let trailer =
        trailer.ok_or_else(|| CoreError::MalformedFile("labels file missing trailer".into()))?;
    if trailer.samples != samples.len() {
        return Err(CoreError::MalformedFile(format!(
            "trailer claims {} samples, file has {}",
            trailer.samples,
            samples.len()
        )));
    }
    Ok((header, samples, trailer))
}
