//! Task utility: binary scoring rules, expected-utility estimation by
//! rollouts, exact enumeration for small outcome spaces, and the brute-force
//! pivot oracle built on top of them.
//!
//! A token is a *pivot* for a prefix when committing to it drops the
//! expected downstream utility below the prefix's own expected utility (less
//! a tolerance). Everything downstream — labeling, the learned scorer, the
//! acceptance gate — is an approximation of that oracle.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decode::Decoder;
use crate::dist::{adjust_distribution, GenerationParams, TokenId, EOS};
use crate::error::{CoreError, Result};
use crate::model::{rollout_budget, SequenceModel};
use crate::par::{map_indexed, stream_rng};

/// Largest outcome count (vocab^horizon) we are willing to enumerate exactly.
pub const ENUMERATION_CAP: u128 = 10_000;

// ---------------------------------------------------------------------------
// Scoring rules
// ---------------------------------------------------------------------------

/// Deterministic output evaluators over the synthetic vocabulary.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum UtilityRule {
    /// Success iff the output contains `first` immediately followed by
    /// `second`, before any EOS.
    Substring { first: TokenId, second: TokenId },
    /// Success iff the output token ids sum to the same residue as the
    /// context ids, modulo `modulus`. EOS contributes zero either way.
    Checksum { modulus: usize },
}

/// A scoring rule plus the success threshold turning scores into {0, 1}.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct UtilityFn {
    #[serde(flatten)]
    pub rule: UtilityRule,
    /// Outputs scoring at least this much count as successes.
    pub theta: f64,
}

impl UtilityFn {
    pub fn validate(&self, vocab: usize) -> Result<()> {
        match self.rule {
            UtilityRule::Substring { first, second } => {
                for t in [first, second] {
                    if t.index() >= vocab {
                        return Err(CoreError::InvalidToken { id: t.0, vocab });
                    }
                    if t == EOS {
                        return Err(CoreError::InvalidConfig(
                            "substring pattern must not contain EOS".into(),
                        ));
                    }
                }
            }
            UtilityRule::Checksum { modulus } => {
                if modulus < 2 {
                    return Err(CoreError::InvalidConfig(format!(
                        "checksum modulus must be at least 2, got {modulus}"
                    )));
                }
            }
        }
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(CoreError::InvalidConfig(format!(
                "theta must lie in [0, 1], got {}",
                self.theta
            )));
        }
        Ok(())
    }

    /// Raw score of a complete output; pure and deterministic.
    pub fn eval(&self, output: &[TokenId], context: &[TokenId]) -> f64 {
        match self.rule {
            UtilityRule::Substring { first, second } => {
                let body_len = output.iter().position(|&t| t == EOS).unwrap_or(output.len());
                let body = &output[..body_len];
                let hit = body.windows(2).any(|w| w[0] == first && w[1] == second);
                if hit {
                    1.0
                } else {
                    0.0
                }
            }
            UtilityRule::Checksum { modulus } => {
                let m = modulus as u64;
                let residue = |toks: &[TokenId]| -> u64 {
                    toks.iter().map(|t| u64::from(t.0)).sum::<u64>() % m
                };
                if residue(output) == residue(context) {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// Binary utility: score at or above theta.
    pub fn utility(&self, output: &[TokenId], context: &[TokenId]) -> bool {
        self.eval(output, context) >= self.theta
    }

    /// Binary utility as 0.0/1.0, the form every estimator averages.
    pub fn utility01(&self, output: &[TokenId], context: &[TokenId]) -> f64 {
        if self.utility(output, context) {
            1.0
        } else {
            0.0
        }
    }
}

// ---------------------------------------------------------------------------
// Monte Carlo estimation
// ---------------------------------------------------------------------------

/// One sampled continuation and whether the completed output succeeded.
#[derive(Debug, Clone)]
pub struct RolloutRecord {
    /// The sampled suffix only (prefix excluded).
    pub tokens: Vec<TokenId>,
    pub success: bool,
}

/// A binomial estimate of expected utility.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct RolloutEstimate {
    pub mean: f64,
    pub successes: u32,
    pub n: u32,
}

impl RolloutEstimate {
    pub fn std_error(&self) -> f64 {
        (self.mean * (1.0 - self.mean) / self.n as f64).sqrt()
    }
}

/// Expected utility, exact or sampled, with a uniform accessor.
#[derive(Debug, Clone, Copy)]
pub enum UtilityEstimate {
    Exact(f64),
    Sampled(RolloutEstimate),
}

impl UtilityEstimate {
    pub fn mean(&self) -> f64 {
        match self {
            UtilityEstimate::Exact(v) => *v,
            UtilityEstimate::Sampled(e) => e.mean,
        }
    }

    pub fn is_exact(&self) -> bool {
        matches!(self, UtilityEstimate::Exact(_))
    }
}

/// Remaining output budget after committing to `prefix_len` tokens.
fn remaining_budget(params: &GenerationParams, prefix: &[TokenId]) -> usize {
    if prefix.last() == Some(&EOS) {
        return 0;
    }
    params.max_len.saturating_sub(prefix.len())
}

/// Rolls out `n` continuations of `prefix` under `model` and scores each
/// completed output. Returns both the estimate and the raw rollouts (the
/// labeling judge needs the successful ones).
pub fn rollout_batch(
    model: &dyn SequenceModel,
    context: &[TokenId],
    prefix: &[TokenId],
    u: &UtilityFn,
    n: usize,
    params: &GenerationParams,
    rng: &mut ChaCha8Rng,
) -> Result<(RolloutEstimate, Vec<RolloutRecord>)> {
    if n == 0 {
        return Err(CoreError::EmptyInput("rollout count must be positive".into()));
    }
    let budget = remaining_budget(params, prefix);
    let mut full_ctx = context.to_vec();
    full_ctx.extend_from_slice(prefix);

    let mut records = Vec::with_capacity(n);
    let mut successes = 0u32;
    let mut output = prefix.to_vec();
    for _ in 0..n {
        let suffix = if budget == 0 {
            Vec::new()
        } else {
            rollout_budget(model, &full_ctx, budget, params, rng)?
        };
        output.truncate(prefix.len());
        output.extend_from_slice(&suffix);
        let success = u.utility(&output, context);
        if success {
            successes += 1;
        }
        records.push(RolloutRecord {
            tokens: suffix,
            success,
        });
    }
    let est = RolloutEstimate {
        mean: f64::from(successes) / n as f64,
        successes,
        n: n as u32,
    };
    Ok((est, records))
}

/// [`rollout_batch`] without the per-rollout records.
pub fn expected_utility(
    model: &dyn SequenceModel,
    context: &[TokenId],
    prefix: &[TokenId],
    u: &UtilityFn,
    n: usize,
    params: &GenerationParams,
    rng: &mut ChaCha8Rng,
) -> Result<RolloutEstimate> {
    rollout_batch(model, context, prefix, u, n, params, rng).map(|(e, _)| e)
}

// ---------------------------------------------------------------------------
// Exact enumeration
// ---------------------------------------------------------------------------

/// True when a `vocab`-ary tree of depth `horizon` fits under
/// [`ENUMERATION_CAP`] leaves.
pub fn enumerable(vocab: usize, horizon: usize) -> bool {
    let Some(n) = (vocab as u128).checked_pow(horizon as u32) else {
        return false;
    };
    n <= ENUMERATION_CAP
}

/// Exact expected utility of continuing `prefix` under the adjusted model,
/// by enumerating every continuation up to the budget. EOS terminates a
/// branch early. Errors when the outcome space exceeds the cap.
pub fn exact_expected_utility(
    model: &dyn SequenceModel,
    context: &[TokenId],
    prefix: &[TokenId],
    u: &UtilityFn,
    params: &GenerationParams,
) -> Result<f64> {
    let budget = remaining_budget(params, prefix);
    if !enumerable(model.vocab_size(), budget) {
        return Err(CoreError::NotEnumerable(format!(
            "{}^{budget} continuations",
            model.vocab_size()
        )));
    }
    let mut seq = context.to_vec();
    seq.extend_from_slice(prefix);
    enumerate_rec(model, context.len(), &mut seq, budget, u, params)
}

fn enumerate_rec(
    model: &dyn SequenceModel,
    context_len: usize,
    seq: &mut Vec<TokenId>,
    remaining: usize,
    u: &UtilityFn,
    params: &GenerationParams,
) -> Result<f64> {
    if remaining == 0 {
        let (context, output) = seq.split_at(context_len);
        return Ok(u.utility01(output, context));
    }
    let d = adjust_distribution(&model.next_distribution(seq)?, params);
    let mut acc = 0.0;
    for i in 0..d.vocab_size() {
        let p = d.probs()[i];
        if p <= 0.0 {
            continue;
        }
        let tok = TokenId(i as u32);
        seq.push(tok);
        let v = if tok == EOS {
            let (context, output) = seq.split_at(context_len);
            u.utility01(output, context)
        } else {
            enumerate_rec(model, context_len, seq, remaining - 1, u, params)?
        };
        seq.pop();
        acc += p * v;
    }
    Ok(acc)
}

// ---------------------------------------------------------------------------
// Pivot oracle
// ---------------------------------------------------------------------------

/// Settings for the brute-force pivot decision.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PivotOracleConfig {
    /// Utility drop tolerated before a token counts as a pivot. Zero means
    /// any non-increase (ties included) is a pivot.
    pub epsilon: f64,
    /// Rollouts per estimate when enumeration is out of reach.
    pub n_rollouts: usize,
    pub params: GenerationParams,
}

/// Ground-truth pivot decision for `candidate` appended to `prefix`:
/// pivot iff `U(prefix + candidate) <= U(prefix) - epsilon`, with both sides
/// enumerated exactly when the outcome space allows and estimated by rollouts
/// otherwise.
pub fn is_pivot_oracle(
    model: &dyn SequenceModel,
    context: &[TokenId],
    prefix: &[TokenId],
    candidate: TokenId,
    u: &UtilityFn,
    cfg: &PivotOracleConfig,
    rng: &mut ChaCha8Rng,
) -> Result<bool> {
    let mut with_cand = prefix.to_vec();
    with_cand.push(candidate);
    let budget = remaining_budget(&cfg.params, prefix);
    let (u_base, u_cand) = if enumerable(model.vocab_size(), budget) {
        (
            exact_expected_utility(model, context, prefix, u, &cfg.params)?,
            exact_expected_utility(model, context, &with_cand, u, &cfg.params)?,
        )
    } else {
        (
            expected_utility(model, context, prefix, u, cfg.n_rollouts, &cfg.params, rng)?.mean,
            expected_utility(model, context, &with_cand, u, cfg.n_rollouts, &cfg.params, rng)?.mean,
        )
    };
    Ok(u_cand <= u_base - cfg.epsilon)
}

// ---------------------------------------------------------------------------
// Utility preservation between decoders
// ---------------------------------------------------------------------------

/// Paired comparison of two decoders' expected utility over a context batch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PreservationReport {
    pub decoder_a: String,
    pub decoder_b: String,
    pub mean_a: f64,
    pub mean_b: f64,
    /// `mean_a - mean_b`, averaged per context first.
    pub gap: f64,
    pub gap_std_error: f64,
    pub epsilon: f64,
    pub contexts: usize,
    pub runs_per_context: usize,
    /// True when the gap clears `-epsilon` within two standard errors.
    pub holds: bool,
}

/// Estimates whether decoder `a` preserves decoder `b`'s utility up to
/// `epsilon`. Each context gets `runs` generations from both decoders with a
/// shared derived seed (common random numbers), and the per-context utility
/// gaps are averaged.
pub fn check_utility_preservation(
    a: &dyn Decoder,
    b: &dyn Decoder,
    contexts: &[Vec<TokenId>],
    u: &UtilityFn,
    runs: usize,
    epsilon: f64,
    seed: u64,
) -> Result<PreservationReport> {
    if contexts.is_empty() {
        return Err(CoreError::EmptyInput("no contexts to compare on".into()));
    }
    if runs == 0 {
        return Err(CoreError::EmptyInput("runs per context must be positive".into()));
    }
    let per_context: Result<Vec<(f64, f64)>> = map_indexed(contexts.len(), |i| {
        let ctx = &contexts[i];
        let mean_for = |dec: &dyn Decoder| -> Result<f64> {
            let mut rng = stream_rng(seed, "preserve", i as u64);
            let mut total = 0.0;
            for _ in 0..runs {
                let rec = dec.generate(ctx, &mut rng)?;
                total += u.utility01(&rec.output, ctx);
            }
            Ok(total / runs as f64)
        };
        Ok((mean_for(a)?, mean_for(b)?))
    })
    .into_iter()
    .collect();
    let per_context = per_context?;

    let m = per_context.len() as f64;
    let mean_a = per_context.iter().map(|p| p.0).sum::<f64>() / m;
    let mean_b = per_context.iter().map(|p| p.1).sum::<f64>() / m;
    let gaps: Vec<f64> = per_context.iter().map(|p| p.0 - p.1).collect();
    let gap = mean_a - mean_b;
    let var = gaps.iter().map(|g| (g - gap) * (g - gap)).sum::<f64>() / (m - 1.0).max(1.0);
    let gap_std_error = (var / m).sqrt();

    Ok(PreservationReport {
        decoder_a: a.id().to_string(),
        decoder_b: b.id().to_string(),
        mean_a,
        mean_b,
        gap,
        gap_std_error,
        epsilon,
        contexts: contexts.len(),
        runs_per_context: runs,
        holds: gap + 2.0 * gap_std_error >= -epsilon,
    })
}
