//! Sequence models over a small vocabulary, plus the synthetic target/draft
//! pairs used throughout the test and simulation stack.
//!
//! A [`TableModel`] is a dense order-k transition table: one conditional
//! distribution per k-token context class. Tables are cheap to evaluate,
//! exactly inspectable (every row can be read back), and enumerable, which is
//! what lets the rest of the engine be checked against closed-form oracles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as Sampler, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dist::{adjust_distribution, Distribution, GenerationParams, TokenId, EOS};
use crate::error::{CoreError, Result};
use crate::par::{derive_seed, stream_rng};
use crate::utility::UtilityFn;

/// Upper bound on table rows (vocab^order); keeps misconfigured specs from
/// allocating gigabytes.
pub const MAX_TABLE_ROWS: usize = 1 << 20;

/// Concentration of the per-row Dirichlet prior for synthetic tables. Values
/// below 1 yield peaked rows, so draft/target disagreements actually matter.
pub const ROW_CONCENTRATION: f64 = 0.5;

/// A conditional next-token model. Implementations must be deterministic:
/// equal contexts always produce equal distributions and features.
pub trait SequenceModel: Send + Sync {
    fn vocab_size(&self) -> usize;

    /// Number of trailing context tokens the model conditions on.
    fn order(&self) -> usize;

    /// Length of the feature vector returned by [`Self::hidden_features`].
    fn feature_dim(&self) -> usize;

    /// Distribution over the next token given the full preceding sequence.
    fn next_distribution(&self, context: &[TokenId]) -> Result<Distribution>;

    /// A fixed-dimension summary of the conditioning state, standing in for
    /// an intermediate-layer hidden state. Deterministic in the context.
    fn hidden_features(&self, context: &[TokenId]) -> Result<Vec<f64>>;
}

// ---------------------------------------------------------------------------
// Dense order-k table model
// ---------------------------------------------------------------------------

/// Seeded random projection of the last-k context window into feature space.
/// A target/draft pair shares one embedding, mirroring a draft that reads the
/// target's hidden states.
#[derive(Debug, Clone)]
struct ContextEmbedding {
    vocab: usize,
    order: usize,
    dim: usize,
    /// One `dim`-vector per (window position, token id), flattened.
    table: Vec<f64>,
    base: Vec<f64>,
}

impl ContextEmbedding {
    fn build(vocab: usize, order: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / ((order + 1) as f64).sqrt();
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n)
                .map(|_| {
                    let x: f64 = StandardNormal.sample(&mut rng);
                    x * scale
                })
                .collect()
        };
        let table = draw(order * vocab * dim);
        let base = draw(dim);
        Self {
            vocab,
            order,
            dim,
            table,
            base,
        }
    }

    /// Features for a window of exactly `order` tokens (EOS-padded upstream).
    fn features(&self, window: &[TokenId]) -> Vec<f64> {
        debug_assert_eq!(window.len(), self.order);
        let mut h = self.base.clone();
        for (pos, tok) in window.iter().enumerate() {
            let off = (pos * self.vocab + tok.index()) * self.dim;
            for (j, hj) in h.iter_mut().enumerate() {
                *hj += self.table[off + j];
            }
        }
        h
    }
}

/// Dense order-k Markov model: `vocab^order` rows, each a distribution over
/// the next token.
#[derive(Debug, Clone)]
pub struct TableModel {
    vocab: usize,
    order: usize,
    /// Row-major `n_rows x vocab` probabilities.
    rows: Vec<f64>,
    embedding: ContextEmbedding,
}

fn table_rows(vocab: usize, order: usize) -> Result<usize> {
    let n = (vocab as u128).checked_pow(order as u32).ok_or_else(|| {
        CoreError::InvalidConfig(format!("table size overflows: {vocab}^{order}"))
    })?;
    if n > MAX_TABLE_ROWS as u128 {
        return Err(CoreError::InvalidConfig(format!(
            "table would need {n} rows (vocab {vocab}, order {order}); cap is {MAX_TABLE_ROWS}"
        )));
    }
    Ok(n as usize)
}

impl TableModel {
    /// Builds a model with rows drawn independently from a symmetric
    /// Dirichlet([`ROW_CONCENTRATION`]) prior.
    pub fn dirichlet(vocab: usize, order: usize, feature_dim: usize, seed: u64) -> Result<Self> {
        if vocab < 2 {
            return Err(CoreError::InvalidConfig(format!(
                "vocab must be at least 2, got {vocab}"
            )));
        }
        if feature_dim == 0 {
            return Err(CoreError::InvalidConfig("feature_dim must be positive".into()));
        }
        let n_rows = table_rows(vocab, order)?;
        let mut rng = stream_rng(seed, "table-rows", 0);
        let gamma = Gamma::new(ROW_CONCENTRATION, 1.0)
            .expect("fixed positive concentration is a valid Gamma shape");
        let mut rows = Vec::with_capacity(n_rows * vocab);
        for _ in 0..n_rows {
            // Normalized independent Gamma(a, 1) draws are Dirichlet(a).
            let draws: Vec<f64> = (0..vocab).map(|_| gamma.sample(&mut rng)).collect();
            let sum: f64 = draws.iter().sum();
            if sum > 0.0 && sum.is_finite() {
                rows.extend(draws.iter().map(|g| g / sum));
            } else {
                rows.extend(std::iter::repeat(1.0 / vocab as f64).take(vocab));
            }
        }
        Ok(Self {
            vocab,
            order,
            rows,
            embedding: ContextEmbedding::build(
                vocab,
                order,
                feature_dim,
                derive_seed(seed, "hidden-features", 0),
            ),
        })
    }

    /// Builds a model from explicit rows (mostly for tests and oracles). Rows
    /// are indexed by the base-`vocab` number formed from the context window,
    /// oldest token most significant.
    pub fn from_rows(
        vocab: usize,
        order: usize,
        rows: Vec<Vec<f64>>,
        feature_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        let n_rows = table_rows(vocab, order)?;
        if rows.len() != n_rows {
            return Err(CoreError::InvalidConfig(format!(
                "expected {n_rows} rows for vocab {vocab} order {order}, got {}",
                rows.len()
            )));
        }
        let mut flat = Vec::with_capacity(n_rows * vocab);
        for (i, row) in rows.into_iter().enumerate() {
            if row.len() != vocab {
                return Err(CoreError::InvalidConfig(format!(
                    "row {i} has {} entries, want {vocab}",
                    row.len()
                )));
            }
            Distribution::new(row.clone())
                .map_err(|e| CoreError::InvalidConfig(format!("row {i}: {e}")))?;
            flat.extend(row);
        }
        Ok(Self {
            vocab,
            order,
            rows: flat,
            embedding: ContextEmbedding::build(
                vocab,
                order,
                feature_dim,
                derive_seed(seed, "hidden-features", 0),
            ),
        })
    }

    /// Blends every row toward the uniform distribution:
    /// `(1 - strength) * row + strength / vocab`. Strength 0 is a copy,
    /// strength 1 is fully uniform. The embedding is shared unchanged.
    pub fn mix_with_uniform(&self, strength: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&strength) {
            return Err(CoreError::InvalidConfig(format!(
                "mix strength must lie in [0, 1], got {strength}"
            )));
        }
        let floor = strength / self.vocab as f64;
        let rows = self
            .rows
            .iter()
            .map(|&p| (1.0 - strength) * p + floor)
            .collect();
        Ok(Self {
            vocab: self.vocab,
            order: self.order,
            rows,
            embedding: self.embedding.clone(),
        })
    }

    /// Index of the table row conditioning on `context`. Errors if any
    /// context token (not just the window) is out of vocabulary, so invalid
    /// sequences fail loudly wherever they first appear.
    pub fn row_index(&self, context: &[TokenId]) -> Result<usize> {
        for t in context {
            if t.index() >= self.vocab {
                return Err(CoreError::InvalidToken {
                    id: t.0,
                    vocab: self.vocab,
                });
            }
        }
        Ok(self
            .window(context)
            .iter()
            .fold(0usize, |acc, t| acc * self.vocab + t.index()))
    }

    /// Last `order` tokens, left-padded with EOS when the context is shorter.
    fn window(&self, context: &[TokenId]) -> Vec<TokenId> {
        let mut w = vec![EOS; self.order];
        let take = context.len().min(self.order);
        let dst = self.order - take;
        w[dst..].copy_from_slice(&context[context.len() - take..]);
        w
    }

    /// Read back one table row.
    pub fn row(&self, index: usize) -> &[f64] {
        &self.rows[index * self.vocab..(index + 1) * self.vocab]
    }
}

impl SequenceModel for TableModel {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn order(&self) -> usize {
        self.order
    }

    fn feature_dim(&self) -> usize {
        self.embedding.dim
    }

    fn next_distribution(&self, context: &[TokenId]) -> Result<Distribution> {
        let idx = self.row_index(context)?;
        Distribution::new(self.row(idx).to_vec())
    }

    fn hidden_features(&self, context: &[TokenId]) -> Result<Vec<f64>> {
        // Same validation as row lookup: features for an invalid sequence are
        // meaningless.
        self.row_index(context)?;
        Ok(self.embedding.features(&self.window(context)))
    }
}

// ---------------------------------------------------------------------------
// Synthetic task specs
// ---------------------------------------------------------------------------

/// Everything needed to rebuild a synthetic target/draft pair and its
/// utility function from a seed.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SyntheticTaskSpec {
    pub vocab_size: usize,
    /// Context order k of the transition tables.
    pub order: usize,
    /// How far the draft is pulled toward uniform, in [0, 1]. Zero makes the
    /// draft an exact copy of the target.
    pub perturbation: f64,
    /// Hidden feature dimension exposed to the classifier.
    #[serde(rename = "d_h")]
    pub hidden_dim: usize,
    pub seed: u64,
    pub utility: UtilityFn,
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(CoreError::InvalidConfig(format!(
                "vocab_size must be at least 2, got {}",
                self.vocab_size
            )));
        }
        table_rows(self.vocab_size, self.order)?;
        if !(0.0..=1.0).contains(&self.perturbation) {
            return Err(CoreError::InvalidConfig(format!(
                "perturbation must lie in [0, 1], got {}",
                self.perturbation
            )));
        }
        if self.hidden_dim == 0 {
            return Err(CoreError::InvalidConfig("d_h must be positive".into()));
        }
        self.utility.validate(self.vocab_size)?;
        Ok(())
    }
}

/// Builds the (target, draft) pair for a spec. The target's rows are
/// Dirichlet draws; the draft is the target blended toward uniform by the
/// perturbation strength. Both share one feature embedding.
pub fn make_synthetic_pair(spec: &SyntheticTaskSpec) -> Result<(TableModel, TableModel)> {
    spec.validate()?;
    let target = TableModel::dirichlet(
        spec.vocab_size,
        spec.order,
        spec.hidden_dim,
        derive_seed(spec.seed, "target-table", 0),
    )?;
    let draft = target.mix_with_uniform(spec.perturbation)?;
    Ok((target, draft))
}

// ---------------------------------------------------------------------------
// Plain autoregressive generation
// ---------------------------------------------------------------------------

/// Samples up to `budget` tokens autoregressively, applying the sampling
/// adjustments at each step, stopping after EOS.
pub fn rollout_budget(
    model: &dyn SequenceModel,
    context: &[TokenId],
    budget: usize,
    params: &GenerationParams,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<TokenId>> {
    let mut seq = context.to_vec();
    let mut out = Vec::new();
    for _ in 0..budget {
        let d = adjust_distribution(&model.next_distribution(&seq)?, params);
        let t = d.sample(rng);
        out.push(t);
        seq.push(t);
        if t == EOS {
            break;
        }
    }
    Ok(out)
}

/// [`rollout_budget`] with the budget taken from `params.max_len`.
pub fn rollout(
    model: &dyn SequenceModel,
    context: &[TokenId],
    params: &GenerationParams,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<TokenId>> {
    rollout_budget(model, context, params.max_len, params, rng)
}

/// Deterministic batch of task contexts: `count` sequences of `len` tokens
/// drawn uniformly from the non-EOS vocabulary.
pub fn sample_contexts(vocab: usize, count: usize, len: usize, seed: u64) -> Vec<Vec<TokenId>> {
    (0..count)
        .map(|i| {
            let mut rng = stream_rng(seed, "task-context", i as u64);
            (0..len)
                .map(|_| TokenId(rng.random_range(1..vocab as u32)))
                .collect()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::utility::UtilityRule;

    fn checksum_spec(vocab: usize, order: usize, perturbation: f64, seed: u64) -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            vocab_size: vocab,
            order,
            perturbation,
            hidden_dim: 6,
            seed,
            utility: UtilityFn {
                rule: UtilityRule::Checksum { modulus: vocab },
                theta: 0.5,
            },
        }
    }

    #[test]
    fn test_order_one_lookup_reads_back_table_row() {
        let m = TableModel::dirichlet(4, 1, 4, 42).unwrap();
        // For k = 1 the row index is just the last token id.
        let d = m.next_distribution(&[TokenId(2), TokenId(3), TokenId(1)]).unwrap();
        assert_eq!(d.probs(), m.row(1));
        let d = m.next_distribution(&[TokenId(3)]).unwrap();
        assert_eq!(d.probs(), m.row(3));
        // Empty context pads with EOS.
        let d = m.next_distribution(&[]).unwrap();
        assert_eq!(d.probs(), m.row(0));
    }

    #[test]
    fn test_order_zero_is_a_fixed_marginal() {
        let m = TableModel::from_rows(3, 0, vec![vec![0.7, 0.2, 0.1]], 4, 1).unwrap();
        let a = m.next_distribution(&[]).unwrap();
        let b = m.next_distribution(&[TokenId(1), TokenId(2), TokenId(2)]).unwrap();
        assert_eq!(a.probs(), &[0.7, 0.2, 0.1]);
        assert_eq!(a, b);
    }

    #[test]
    fn test_dirichlet_rows_are_valid_and_seed_dependent() {
        let a = TableModel::dirichlet(5, 1, 4, 7).unwrap();
        let b = TableModel::dirichlet(5, 1, 4, 7).unwrap();
        let c = TableModel::dirichlet(5, 1, 4, 8).unwrap();
        for i in 0..5 {
            assert!(Distribution::new(a.row(i).to_vec()).is_ok());
            assert_eq!(a.row(i), b.row(i), "same seed must rebuild the same table");
        }
        assert_ne!(a.row(0), c.row(0), "different seeds should differ");
    }

    #[test]
    fn test_mix_with_uniform_blends_entrywise() {
        let t = TableModel::dirichlet(4, 1, 4, 11).unwrap();
        let d = t.mix_with_uniform(0.3).unwrap();
        for r in 0..4 {
            for j in 0..4 {
                let want = 0.7 * t.row(r)[j] + 0.3 / 4.0;
                assert!((d.row(r)[j] - want).abs() < 1e-12);
            }
        }
        let full = t.mix_with_uniform(1.0).unwrap();
        for j in 0..4 {
            assert!((full.row(2)[j] - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn test_zero_perturbation_pair_is_identical() {
        let (t, d) = make_synthetic_pair(&checksum_spec(5, 1, 0.0, 3)).unwrap();
        for r in 0..5 {
            assert_eq!(t.row(r), d.row(r));
        }
    }

    #[test]
    fn test_out_of_vocab_token_is_rejected() {
        let m = TableModel::dirichlet(4, 1, 4, 1).unwrap();
        let err = m.next_distribution(&[TokenId(9)]).unwrap_err();
        assert!(matches!(err, CoreError::InvalidToken { id: 9, vocab: 4 }));
        // Early out-of-range tokens are caught even if outside the window.
        assert!(m.next_distribution(&[TokenId(9), TokenId(1)]).is_err());
        assert!(m.hidden_features(&[TokenId(9)]).is_err());
    }

    #[test]
    fn test_table_size_cap() {
        assert!(TableModel::dirichlet(16, 6, 4, 0).is_err());
    }

    #[test]
    fn test_hidden_features_deterministic_and_shared() {
        let (t, d) = make_synthetic_pair(&checksum_spec(5, 2, 0.4, 9)).unwrap();
        let ctx = [TokenId(1), TokenId(4)];
        let a = t.hidden_features(&ctx).unwrap();
        let b = t.hidden_features(&ctx).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), t.feature_dim());
        // Target and draft share the embedding.
        assert_eq!(a, d.hidden_features(&ctx).unwrap());
        // Different window, different features (overwhelmingly likely).
        let c = t.hidden_features(&[TokenId(2), TokenId(3)]).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn test_rollout_stops_after_eos_and_respects_budget() {
        // Row for every context: EOS with probability 1 -> rollout is [EOS].
        let rows = vec![vec![1.0, 0.0]; 2];
        let m = TableModel::from_rows(2, 1, rows, 2, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = rollout(&m, &[TokenId(1)], &GenerationParams::default(), &mut rng).unwrap();
        assert_eq!(out, vec![EOS]);

        // Never-EOS model: output length equals the budget exactly.
        let rows = vec![vec![0.0, 1.0]; 2];
        let m = TableModel::from_rows(2, 1, rows, 2, 0).unwrap();
        let params = GenerationParams {
            max_len: 7,
            ..Default::default()
        };
        let out = rollout(&m, &[TokenId(1)], &params, &mut rng).unwrap();
        assert_eq!(out.len(), 7);
        assert!(out.iter().all(|&t| t == TokenId(1)));
    }

    #[test]
    fn test_sample_contexts_shape_and_determinism() {
        let a = sample_contexts(6, 10, 4, 5);
        let b = sample_contexts(6, 10, 4, 5);
        assert_eq!(a, b);
        assert_eq!(a.len(), 10);
        for ctx in &a {
            assert_eq!(ctx.len(), 4);
            assert!(ctx.iter().all(|t| t.0 >= 1 && t.0 < 6), "no EOS inside a context");
        }
        assert_ne!(a, sample_contexts(6, 10, 4, 6));
    }

    #[test]
    fn test_spec_validation() {
        assert!(checksum_spec(1, 1, 0.5, 0).validate().is_err());
        assert!(checksum_spec(4, 1, 1.5, 0).validate().is_err());
        assert!(checksum_spec(4, 1, 0.5, 0).validate().is_ok());
    }
}
