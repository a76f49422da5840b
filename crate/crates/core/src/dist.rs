//! Token-level probability distributions and the sampling adjustments
//! (temperature, top-k, top-p) applied before any draw.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Tolerance for "sums to one" checks on incoming probability vectors.
pub const SUM_TOLERANCE: f64 = 1e-9;

/// Slack used when accumulating nucleus mass, so that a boundary that is
/// exactly representable (e.g. 0.5 + 0.1 vs 0.6) is treated as inside.
const NUCLEUS_EPS: f64 = 1e-12;

/// A vocabulary index. Id 0 is reserved for the end-of-sequence token.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default,
)]
#[serde(transparent)]
pub struct TokenId(pub u32);

/// End-of-sequence marker; generation stops after it is emitted.
pub const EOS: TokenId = TokenId(0);

impl TokenId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl std::fmt::Display for TokenId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A dense distribution over the vocabulary: non-negative, finite entries
/// summing to one within [`SUM_TOLERANCE`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Distribution {
    probs: Vec<f64>,
}

impl Distribution {
    /// Validates and wraps a probability vector. The vocabulary must have at
    /// least two entries (EOS plus one content token).
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(CoreError::InvalidDistribution(format!(
                "vocabulary must have at least 2 tokens, got {}",
                probs.len()
            )));
        }
        let mut sum = 0.0;
        for (i, &p) in probs.iter().enumerate() {
            if !p.is_finite() || p < 0.0 {
                return Err(CoreError::InvalidDistribution(format!(
                    "entry {i} is {p}, want a finite value >= 0"
                )));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(CoreError::InvalidDistribution(format!(
                "entries sum to {sum}, want 1 within {SUM_TOLERANCE}"
            )));
        }
        Ok(Self { probs })
    }

    /// Normalizes a non-negative weight vector into a distribution. Errors if
    /// every weight is zero.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        let sum: f64 = weights.iter().sum();
        if !(sum > 0.0) || !sum.is_finite() {
            return Err(CoreError::InvalidDistribution(format!(
                "weight sum is {sum}, cannot normalize"
            )));
        }
        let probs = weights.into_iter().map(|w| w / sum).collect();
        // Re-validate: catches negative or non-finite weights too.
        Self::new(probs)
    }

    pub fn uniform(vocab: usize) -> Result<Self> {
        Self::new(vec![1.0 / vocab as f64; vocab])
    }

    /// All mass on a single token.
    pub fn point_mass(vocab: usize, token: TokenId) -> Result<Self> {
        if token.index() >= vocab {
            return Err(CoreError::InvalidToken {
                id: token.0,
                vocab,
            });
        }
        let mut probs = vec![0.0; vocab];
        probs[token.index()] = 1.0;
        Self::new(probs)
    }

    pub fn vocab_size(&self) -> usize {
        self.probs.len()
    }

    pub fn prob(&self, token: TokenId) -> f64 {
        self.probs[token.index()]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Shannon entropy in nats; the 0 * ln 0 terms contribute zero.
    pub fn entropy(&self) -> f64 {
        self.probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| -p * p.ln())
            .sum()
    }

    /// Lowest token id with maximal probability.
    pub fn argmax(&self) -> TokenId {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        TokenId(best as u32)
    }

    /// Inverse-CDF sampling from one uniform draw.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> TokenId {
        let u: f64 = rng.random();
        let mut cum = 0.0;
        let mut last_positive = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p <= 0.0 {
                continue;
            }
            cum += p;
            last_positive = i;
            if u < cum {
                return TokenId(i as u32);
            }
        }
        // Rounding in the cumulative sum can leave u just above the final cum;
        // fall back to the last token with positive mass.
        TokenId(last_positive as u32)
    }
}

// ---------------------------------------------------------------------------
// Sampling adjustments
// ---------------------------------------------------------------------------

/// Decode-time sampling controls plus the output-length budget.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GenerationParams {
    /// Softmax temperature; probabilities are raised to 1/temperature.
    pub temperature: f64,
    /// Nucleus bound in (0, 1]; 1 keeps the full support.
    pub top_p: f64,
    /// Keep only the k most probable tokens before the nucleus cut. `None`
    /// disables the filter.
    pub top_k: Option<usize>,
    /// Maximum output length in tokens (the task context excluded).
    pub max_len: usize,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_p: 1.0,
            top_k: None,
            max_len: 32,
        }
    }
}

impl GenerationParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(CoreError::InvalidConfig(format!(
                "temperature must be a positive finite number, got {}",
                self.temperature
            )));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(CoreError::InvalidConfig(format!(
                "top_p must lie in (0, 1], got {}",
                self.top_p
            )));
        }
        if self.top_k == Some(0) {
            return Err(CoreError::InvalidConfig(
                "top_k must be positive when set".into(),
            ));
        }
        if self.max_len == 0 {
            return Err(CoreError::InvalidConfig("max_len must be positive".into()));
        }
        Ok(())
    }

    /// True when [`adjust_distribution`] is the identity for these settings.
    pub fn is_identity(&self) -> bool {
        self.temperature == 1.0 && self.top_p >= 1.0 && self.top_k.is_none()
    }
}

/// Applies temperature, then top-k, then top-p, then renormalizes.
///
/// Conventions, fixed so every stage of the engine agrees:
/// * temperature scales log-probabilities: `p^(1/T)`, zeros stay zero;
/// * top-k keeps the k most probable tokens, ties broken toward the lower id;
/// * top-p keeps the largest prefix of the probability-sorted vocabulary
///   whose cumulative mass stays within `top_p` of the post-top-k
///   distribution, and always keeps at least the most probable token.
pub fn adjust_distribution(dist: &Distribution, params: &GenerationParams) -> Distribution {
    if params.is_identity() {
        return dist.clone();
    }
    let v = dist.vocab_size();
    let mut w: Vec<f64> = dist.probs().to_vec();

    if params.temperature != 1.0 {
        let inv_t = 1.0 / params.temperature;
        for x in w.iter_mut() {
            if *x > 0.0 {
                *x = x.powf(inv_t);
            }
        }
    }

    // Token ids sorted by descending weight, lower id first on ties. Shared
    // by the top-k and top-p cuts so the two filters agree on ordering.
    let mut order: Vec<usize> = (0..v).collect();
    order.sort_by(|&a, &b| w[b].partial_cmp(&w[a]).unwrap().then(a.cmp(&b)));

    if let Some(k) = params.top_k {
        for &i in order.iter().skip(k) {
            w[i] = 0.0;
        }
    }

    // Normalize before the nucleus cut: top_p bounds a mass *fraction*.
    let total: f64 = w.iter().sum();
    debug_assert!(total > 0.0, "argmax weight survives every earlier cut");
    for x in w.iter_mut() {
        *x /= total;
    }

    if params.top_p < 1.0 {
        let mut cum = 0.0;
        let mut kept = 0;
        for &i in order.iter() {
            if w[i] <= 0.0 {
                break;
            }
            if cum + w[i] > params.top_p + NUCLEUS_EPS {
                break;
            }
            cum += w[i];
            kept += 1;
        }
        // A bound below the top token's mass keeps just that token.
        let kept = kept.max(1);
        for &i in order.iter().skip(kept) {
            w[i] = 0.0;
        }
        let total: f64 = w.iter().sum();
        for x in w.iter_mut() {
            *x /= total;
        }
    }

    Distribution { probs: w }
}
