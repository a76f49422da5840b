//! The pivot scorer: feature extraction, a small two-branch MLP, mini-batch
//! training with class-weighted cross-entropy, finite-difference gradient
//! checking, and ROC/AUC evaluation.
//!
//! Architecture: the hidden-state features and the scalar summary
//! `[entropy, p_cand]` pass through separate ReLU branches, are concatenated,
//! fused by one ReLU layer, and projected to two logits. The score is the
//! softmax probability of the pivot class.

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dist::{adjust_distribution, Distribution, GenerationParams, TokenId};
use crate::error::{CoreError, Result};
use crate::format::FileHeader;
use crate::model::SequenceModel;
use crate::par::stream_rng;

/// Index of the pivot class in the two-logit output.
pub const PIVOT_CLASS: usize = 1;

/// Central-difference step for gradient checking.
pub const GRAD_CHECK_STEP: f64 = 1e-5;

// ---------------------------------------------------------------------------
// Features
// ---------------------------------------------------------------------------

/// Input to the scorer for one candidate token.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FeatureVector {
    /// Model hidden features for the conditioning context.
    pub hidden: Vec<f64>,
    /// Entropy of the adjusted target distribution at this position.
    pub entropy: f64,
    /// Adjusted target probability of the candidate token.
    pub p_cand: f64,
}

/// Builds features from an already-computed adjusted target distribution, so
/// call sites that have one (verification, harvesting) reuse the exact same
/// numbers the accept/reject decision saw.
pub fn features_from_dist(
    model: &dyn SequenceModel,
    context: &[TokenId],
    candidate: TokenId,
    target_dist: &Distribution,
) -> Result<FeatureVector> {
    if candidate.index() >= target_dist.vocab_size() {
        return Err(CoreError::InvalidToken {
            id: candidate.0,
            vocab: target_dist.vocab_size(),
        });
    }
    let hidden = model.hidden_features(context)?;
    Ok(FeatureVector {
        hidden,
        entropy: target_dist.entropy(),
        p_cand: target_dist.prob(candidate),
    })
}

/// [`features_from_dist`] with the distribution computed on the spot.
pub fn extract_features(
    model: &dyn SequenceModel,
    context: &[TokenId],
    candidate: TokenId,
    params: &GenerationParams,
) -> Result<FeatureVector> {
    let dist = adjust_distribution(&model.next_distribution(context)?, params);
    features_from_dist(model, context, candidate, &dist)
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

/// Layer widths. `d_in` must match the model's feature dimension; the rest
/// are free.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpDims {
    /// Hidden-feature input width.
    pub d_in: usize,
    /// Hidden branch width.
    pub d_u: usize,
    /// Scalar branch width.
    pub d_v: usize,
    /// Fusion layer width.
    pub d_f: usize,
}

impl Default for MlpDims {
    fn default() -> Self {
        Self {
            d_in: 32,
            d_u: 32,
            d_v: 8,
            d_f: 32,
        }
    }
}

impl MlpDims {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("d_in", self.d_in),
            ("d_u", self.d_u),
            ("d_v", self.d_v),
            ("d_f", self.d_f),
        ] {
            if v == 0 {
                return Err(CoreError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// All weights, row-major. Doubles as the gradient container, since the
/// shapes match by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub dims: MlpDims,
    /// `d_u x d_in`
    pub w_h: Vec<f64>,
    pub b_h: Vec<f64>,
    /// `d_v x 2`
    pub w_s: Vec<f64>,
    pub b_s: Vec<f64>,
    /// `d_f x (d_u + d_v)`
    pub w_f: Vec<f64>,
    pub b_f: Vec<f64>,
    /// `2 x d_f`
    pub w_o: Vec<f64>,
    pub b_o: Vec<f64>,
}

impl MlpParams {
    pub fn zeros(dims: MlpDims) -> Self {
        Self {
            dims,
            w_h: vec![0.0; dims.d_u * dims.d_in],
            b_h: vec![0.0; dims.d_u],
            w_s: vec![0.0; dims.d_v * 2],
            b_s: vec![0.0; dims.d_v],
            w_f: vec![0.0; dims.d_f * (dims.d_u + dims.d_v)],
            b_f: vec![0.0; dims.d_f],
            w_o: vec![0.0; 2 * dims.d_f],
            b_o: vec![0.0; 2],
        }
    }

    /// Uniform(-r, r) weights with the usual fan-based radius, zero biases.
    pub fn init(dims: MlpDims, seed: u64) -> Self {
        let mut rng = stream_rng(seed, "mlp-init", 0);
        let mut p = Self::zeros(dims);
        let mut fill = |w: &mut [f64], fan_in: usize, fan_out: usize| {
            let r = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for x in w.iter_mut() {
                *x = rng.random_range(-r..r);
            }
        };
        fill(&mut p.w_h, dims.d_in, dims.d_u);
        fill(&mut p.w_s, 2, dims.d_v);
        fill(&mut p.w_f, dims.d_u + dims.d_v, dims.d_f);
        fill(&mut p.w_o, dims.d_f, 2);
        p
    }

    fn blocks(&self) -> [&Vec<f64>; 8] {
        [
            &self.w_h, &self.b_h, &self.w_s, &self.b_s, &self.w_f, &self.b_f, &self.w_o, &self.b_o,
        ]
    }

    fn blocks_mut(&mut self) -> [&mut Vec<f64>; 8] {
        [
            &mut self.w_h,
            &mut self.b_h,
            &mut self.w_s,
            &mut self.b_s,
            &mut self.w_f,
            &mut self.b_f,
            &mut self.w_o,
            &mut self.b_o,
        ]
    }

    pub fn n_params(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    /// Flat indexing across all blocks, in declaration order.
    pub fn flat_get(&self, mut idx: usize) -> f64 {
        for b in self.blocks() {
            if idx < b.len() {
                return b[idx];
            }
            idx -= b.len();
        }
        panic!("flat index out of range");
    }

    pub fn flat_add(&mut self, mut idx: usize, delta: f64) {
        for b in self.blocks_mut() {
            if idx < b.len() {
                b[idx] += delta;
                return;
            }
            idx -= b.len();
        }
        panic!("flat index out of range");
    }

    /// `self -= rate * grads`, used by the training loop.
    pub fn step(&mut self, grads: &MlpParams, rate: f64) {
        let gb = grads.blocks();
        for (b, g) in self.blocks_mut().into_iter().zip(gb) {
            for (x, gx) in b.iter_mut().zip(g.iter()) {
                *x -= rate * gx;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Forward and backward passes
// ---------------------------------------------------------------------------

fn check_features(dims: &MlpDims, f: &FeatureVector) -> Result<()> {
    if f.hidden.len() != dims.d_in {
        return Err(CoreError::FeatureExtraction(format!(
            "feature dimension {} does not match classifier input {}",
            f.hidden.len(),
            dims.d_in
        )));
    }
    Ok(())
}

/// `out[r] = w[r,:] . x + b[r]` for a row-major `rows x cols` matrix.
fn affine(w: &[f64], b: &[f64], x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    let mut out = b.to_vec();
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        let mut acc = 0.0;
        for (wi, xi) in row.iter().zip(x) {
            acc += wi * xi;
        }
        out[r] += acc;
    }
    out
}

fn relu(v: &mut [f64]) {
    for x in v.iter_mut() {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

/// Intermediate activations kept for the backward pass.
struct Trace {
    scalars: [f64; 2],
    z_h: Vec<f64>,
    z_s: Vec<f64>,
    /// Concatenated ReLU outputs of both branches.
    concat: Vec<f64>,
    z_f: Vec<f64>,
    a_f: Vec<f64>,
    logits: [f64; 2],
    /// Softmax probabilities.
    probs: [f64; 2],
}

fn forward_trace(p: &MlpParams, f: &FeatureVector) -> Trace {
    let d = &p.dims;
    let scalars = [f.entropy, f.p_cand];
    let z_h = affine(&p.w_h, &p.b_h, &f.hidden, d.d_u, d.d_in);
    let mut u = z_h.clone();
    relu(&mut u);
    let z_s = affine(&p.w_s, &p.b_s, &scalars, d.d_v, 2);
    let mut v = z_s.clone();
    relu(&mut v);
    let mut concat = u;
    concat.extend_from_slice(&v);
    let z_f = affine(&p.w_f, &p.b_f, &concat, d.d_f, d.d_u + d.d_v);
    let mut a_f = z_f.clone();
    relu(&mut a_f);
    let zo = affine(&p.w_o, &p.b_o, &a_f, 2, d.d_f);
    let logits = [zo[0], zo[1]];
    let m = logits[0].max(logits[1]);
    let e0 = (logits[0] - m).exp();
    let e1 = (logits[1] - m).exp();
    let z = e0 + e1;
    Trace {
        scalars,
        z_h,
        z_s,
        concat,
        z_f,
        a_f,
        logits,
        probs: [e0 / z, e1 / z],
    }
}

/// Scored probability that the candidate is a pivot, in [0, 1].
pub fn mlp_forward(params: &MlpParams, features: &FeatureVector) -> Result<f64> {
    check_features(&params.dims, features)?;
    Ok(forward_trace(params, features).probs[PIVOT_CLASS])
}

/// One labeled training example.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub features: FeatureVector,
    pub pivot: bool,
}

/// Per-class loss weights as `(non_pivot, pivot)`. `(1, 1)` reduces to plain
/// cross-entropy.
pub type ClassWeights = (f64, f64);

/// Weights that equalize the total loss mass of both classes:
/// `n / (2 * n_class)`.
pub fn inverse_frequency_weights(n_non_pivot: usize, n_pivot: usize) -> ClassWeights {
    let n = (n_non_pivot + n_pivot) as f64;
    (
        n / (2.0 * n_non_pivot as f64),
        n / (2.0 * n_pivot as f64),
    )
}

fn sample_weight(weights: ClassWeights, pivot: bool) -> f64 {
    if pivot {
        weights.1
    } else {
        weights.0
    }
}

/// Mean class-weighted negative log-likelihood over a batch.
pub fn batch_loss(params: &MlpParams, batch: &[TrainSample], weights: ClassWeights) -> Result<f64> {
    if batch.is_empty() {
        return Err(CoreError::EmptyInput("empty loss batch".into()));
    }
    let mut total = 0.0;
    for s in batch {
        check_features(&params.dims, &s.features)?;
        let t = forward_trace(params, &s.features);
        let y = usize::from(s.pivot);
        let m = t.logits[0].max(t.logits[1]);
        let log_z = ((t.logits[0] - m).exp() + (t.logits[1] - m).exp()).ln() + m;
        let log_p = t.logits[y] - log_z;
        total += -sample_weight(weights, s.pivot) * log_p;
    }
    Ok(total / batch.len() as f64)
}

/// Analytic gradients of [`batch_loss`]; returns `(grads, loss)`.
pub fn batch_grad(
    params: &MlpParams,
    batch: &[TrainSample],
    weights: ClassWeights,
) -> Result<(MlpParams, f64)> {
    if batch.is_empty() {
        return Err(CoreError::EmptyInput("empty gradient batch".into()));
    }
    let d = params.dims;
    let mut g = MlpParams::zeros(d);
    let mut loss = 0.0;
    let inv_b = 1.0 / batch.len() as f64;
    for s in batch {
        check_features(&d, &s.features)?;
        let t = forward_trace(params, &s.features);
        let y = usize::from(s.pivot);
        let w = sample_weight(weights, s.pivot);

        let m = t.logits[0].max(t.logits[1]);
        let log_z = ((t.logits[0] - m).exp() + (t.logits[1] - m).exp()).ln() + m;
        loss += -w * (t.logits[y] - log_z) * inv_b;

        // d loss / d logits, already scaled by weight and batch size.
        let mut dz_o = [t.probs[0], t.probs[1]];
        dz_o[y] -= 1.0;
        dz_o[0] *= w * inv_b;
        dz_o[1] *= w * inv_b;

        for (r, &dz) in dz_o.iter().enumerate() {
            for c in 0..d.d_f {
                g.w_o[r * d.d_f + c] += dz * t.a_f[c];
            }
            g.b_o[r] += dz;
        }

        // Back through the fusion layer.
        let mut da_f = vec![0.0; d.d_f];
        for (r, &dz) in dz_o.iter().enumerate() {
            for c in 0..d.d_f {
                da_f[c] += params.w_o[r * d.d_f + c] * dz;
            }
        }
        let d_concat_len = d.d_u + d.d_v;
        let mut dz_f = da_f;
        for (c, x) in dz_f.iter_mut().enumerate() {
            if t.z_f[c] <= 0.0 {
                *x = 0.0;
            }
        }
        for r in 0..d.d_f {
            let dz = dz_f[r];
            if dz != 0.0 {
                for c in 0..d_concat_len {
                    g.w_f[r * d_concat_len + c] += dz * t.concat[c];
                }
            }
            g.b_f[r] += dz;
        }
        let mut d_concat = vec![0.0; d_concat_len];
        for r in 0..d.d_f {
            let dz = dz_f[r];
            if dz != 0.0 {
                for c in 0..d_concat_len {
                    d_concat[c] += params.w_f[r * d_concat_len + c] * dz;
                }
            }
        }

        // Split back into the two branches.
        let mut dz_h = d_concat[..d.d_u].to_vec();
        for (c, x) in dz_h.iter_mut().enumerate() {
            if t.z_h[c] <= 0.0 {
                *x = 0.0;
            }
        }
        for r in 0..d.d_u {
            let dz = dz_h[r];
            if dz != 0.0 {
                for c in 0..d.d_in {
                    g.w_h[r * d.d_in + c] += dz * s.features.hidden[c];
                }
            }
            g.b_h[r] += dz;
        }

        let mut dz_s = d_concat[d.d_u..].to_vec();
        for (c, x) in dz_s.iter_mut().enumerate() {
            if t.z_s[c] <= 0.0 {
                *x = 0.0;
            }
        }
        for r in 0..d.d_v {
            let dz = dz_s[r];
            if dz != 0.0 {
                for c in 0..2 {
                    g.w_s[r * 2 + c] += dz * t.scalars[c];
                }
            }
            g.b_s[r] += dz;
        }
    }
    Ok((g, loss))
}

/// The ReLU on/off pattern over the whole batch. Central differences are
/// only meaningful where the loss is smooth; a probe whose two evaluation
/// points land on different sides of a kink gets a one-sided slope and would
/// report a bogus mismatch.
fn relu_pattern(p: &MlpParams, batch: &[TrainSample]) -> Vec<bool> {
    let mut bits = Vec::new();
    for s in batch {
        let t = forward_trace(p, &s.features);
        bits.extend(t.z_h.iter().map(|z| *z > 0.0));
        bits.extend(t.z_s.iter().map(|z| *z > 0.0));
        bits.extend(t.z_f.iter().map(|z| *z > 0.0));
    }
    bits
}

/// Compares analytic gradients against central finite differences on
/// `probes` randomly chosen coordinates (all of them when `probes` covers the
/// parameter count). Returns the largest relative error.
///
/// Coordinates whose perturbation flips a ReLU unit anywhere in the batch
/// are skipped: the loss is not differentiable across the kink, so the
/// finite difference says nothing about the gradient there. The error
/// denominator is floored at 1e-6 because the difference quotient itself
/// carries roundoff of roughly machine-epsilon-times-loss over the step;
/// below that scale a mismatch is indistinguishable from noise.
pub fn grad_check(
    params: &MlpParams,
    batch: &[TrainSample],
    weights: ClassWeights,
    probes: usize,
    seed: u64,
) -> Result<f64> {
    let (analytic, _) = batch_grad(params, batch, weights)?;
    let n = params.n_params();
    let indices: Vec<usize> = if probes >= n {
        (0..n).collect()
    } else {
        let mut rng = stream_rng(seed, "grad-check", 0);
        let mut all: Vec<usize> = (0..n).collect();
        all.shuffle(&mut rng);
        all.truncate(probes);
        all
    };
    let mut worst = 0.0f64;
    let mut probe = params.clone();
    for idx in indices {
        probe.flat_add(idx, GRAD_CHECK_STEP);
        let up = batch_loss(&probe, batch, weights)?;
        let pattern_up = relu_pattern(&probe, batch);
        probe.flat_add(idx, -2.0 * GRAD_CHECK_STEP);
        let down = batch_loss(&probe, batch, weights)?;
        let pattern_down = relu_pattern(&probe, batch);
        probe.flat_add(idx, GRAD_CHECK_STEP);
        if pattern_up != pattern_down {
            continue;
        }
        let numeric = (up - down) / (2.0 * GRAD_CHECK_STEP);
        let a = analytic.flat_get(idx);
        let rel = (a - numeric).abs() / f64::max(a.abs() + numeric.abs(), 1e-6);
        worst = worst.max(rel);
    }
    Ok(worst)
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub d_u: usize,
    pub d_v: usize,
    pub d_f: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Fraction of the shuffled dataset used for training; the rest is the
    /// held-out validation split.
    pub split: f64,
    pub seed: u64,
    /// Explicit class weights `(non_pivot, pivot)`; defaults to inverse
    /// class frequency on the training split.
    pub class_weights: Option<ClassWeights>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            d_u: 32,
            d_v: 8,
            d_f: 32,
            epochs: 60,
            batch_size: 32,
            learning_rate: 1e-2,
            split: 0.8,
            seed: 0,
            class_weights: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(CoreError::InvalidConfig(
                "epochs and batch_size must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(CoreError::InvalidConfig(
                "learning_rate must be positive".into(),
            ));
        }
        if !(self.split > 0.0 && self.split < 1.0) {
            return Err(CoreError::InvalidConfig(format!(
                "split must lie strictly between 0 and 1, got {}",
                self.split
            )));
        }
        MlpDims {
            d_in: 1,
            d_u: self.d_u,
            d_v: self.d_v,
            d_f: self.d_f,
        }
        .validate()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    /// Epoch whose parameters were returned (lowest validation loss, first
    /// on ties).
    pub best_epoch: usize,
    pub class_weights: ClassWeights,
    pub train_size: usize,
    pub val_size: usize,
    pub train_pivots: usize,
    pub val_pivots: usize,
}

/// Indices of the shuffled train/validation split for `n` samples. Exposed
/// so evaluation can address the same held-out slice the trainer used.
pub fn split_indices(n: usize, split: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = stream_rng(seed, "train-split", 0);
    idx.shuffle(&mut rng);
    let n_train = ((n as f64) * split).floor() as usize;
    let n_train = n_train.clamp(1, n - 1);
    let val = idx.split_off(n_train);
    (idx, val)
}

/// Trains the scorer by mini-batch gradient descent on the weighted
/// cross-entropy, returning the parameters of the best validation epoch.
pub fn train(samples: &[TrainSample], cfg: &TrainConfig) -> Result<(MlpParams, TrainReport)> {
    cfg.validate()?;
    if samples.len() < 2 {
        return Err(CoreError::EmptyInput(format!(
            "need at least 2 samples to split, got {}",
            samples.len()
        )));
    }
    let d_in = samples[0].features.hidden.len();
    let dims = MlpDims {
        d_in,
        d_u: cfg.d_u,
        d_v: cfg.d_v,
        d_f: cfg.d_f,
    };
    dims.validate()?;

    let (train_idx, val_idx) = split_indices(samples.len(), cfg.split, cfg.seed);
    let train_set: Vec<TrainSample> = train_idx.iter().map(|&i| samples[i].clone()).collect();
    let val_set: Vec<TrainSample> = val_idx.iter().map(|&i| samples[i].clone()).collect();

    let train_pivots = train_set.iter().filter(|s| s.pivot).count();
    if train_pivots == 0 || train_pivots == train_set.len() {
        return Err(CoreError::DegenerateDataset);
    }
    let weights = cfg
        .class_weights
        .unwrap_or_else(|| inverse_frequency_weights(train_set.len() - train_pivots, train_pivots));

    let mut params = MlpParams::init(dims, cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut rng = stream_rng(cfg.seed, "train-epochs", 0);

    let mut best: Option<(f64, usize, MlpParams)> = None;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<TrainSample> = chunk.iter().map(|&i| train_set[i].clone()).collect();
            let (grads, _) = batch_grad(&params, &batch, weights)?;
            params.step(&grads, cfg.learning_rate);
        }
        let train_loss = batch_loss(&params, &train_set, weights)?;
        let val_loss = batch_loss(&params, &val_set, weights)?;
        epochs.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
        });
        let better = match &best {
            None => true,
            Some((best_loss, _, _)) => val_loss < *best_loss,
        };
        if better {
            best = Some((val_loss, epoch, params.clone()));
        }
    }
    let (_, best_epoch, best_params) = best.expect("at least one epoch ran");
    let report = TrainReport {
        epochs,
        best_epoch,
        class_weights: weights,
        train_size: train_set.len(),
        val_size: val_set.len(),
        train_pivots,
        val_pivots: val_set.iter().filter(|s| s.pivot).count(),
    };
    Ok((best_params, report))
}

// ---------------------------------------------------------------------------
// ROC / AUC
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RocCurve {
    /// (false positive rate, true positive rate), from (0,0) to (1,1), one
    /// point per distinct score threshold.
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

/// ROC curve and AUC for raw scores. Tied scores form one threshold group,
/// and the AUC accumulates in integers before a single division, making it
/// exactly the tie-adjusted pair-counting statistic: the fraction of
/// (pivot, non-pivot) pairs ranked correctly, ties at half credit.
pub fn roc_from_scores(scores: &[f64], labels: &[bool]) -> Result<RocCurve> {
    if scores.len() != labels.len() {
        return Err(CoreError::InvalidConfig(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let p: u64 = labels.iter().filter(|&&l| l).count() as u64;
    let n: u64 = labels.len() as u64 - p;
    if p == 0 || n == 0 {
        return Err(CoreError::UndefinedAuc);
    }
    for s in scores {
        if !s.is_finite() {
            return Err(CoreError::InvalidConfig("non-finite score".into()));
        }
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));

    let mut points = vec![(0.0, 0.0)];
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut acc = 0u128; // area in units of 1 / (2 * P * N)
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        let mut group_p = 0u64;
        let mut group_n = 0u64;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            if labels[idx[j]] {
                group_p += 1;
            } else {
                group_n += 1;
            }
            j += 1;
        }
        // Trapezoid over this group: width group_n, heights tp and tp+group_p.
        acc += u128::from(group_n) * u128::from(2 * tp + group_p);
        tp += group_p;
        fp += group_n;
        points.push((fp as f64 / n as f64, tp as f64 / p as f64));
        i = j;
    }
    let auc = acc as f64 / (2 * p * n) as f64;
    Ok(RocCurve { points, auc })
}

/// Scores `samples` with the trained parameters and builds the ROC.
pub fn roc_auc(params: &MlpParams, samples: &[TrainSample]) -> Result<RocCurve> {
    let mut scores = Vec::with_capacity(samples.len());
    let mut labels = Vec::with_capacity(samples.len());
    for s in samples {
        scores.push(mlp_forward(params, &s.features)?);
        labels.push(s.pivot);
    }
    roc_from_scores(&scores, &labels)
}

/// Standard error of the AUC under the null (no separation), used to judge
/// whether a measured AUC clears chance meaningfully.
pub fn auc_null_std_error(n_pivot: usize, n_non_pivot: usize) -> f64 {
    let p = n_pivot as f64;
    let n = n_non_pivot as f64;
    ((p + n + 1.0) / (12.0 * p * n)).sqrt()
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

/// Writes parameters as plain text: a header line, a dims line, then one
/// whitespace-separated line per weight block. `f64` values print in
/// shortest-roundtrip form, so loading restores them bit-exactly.
pub fn save_params<W: Write>(w: &mut W, params: &MlpParams, header: &FileHeader) -> Result<()> {
    writeln!(
        w,
        "{} seed={} digest={}",
        header.schema, header.seed, header.config_digest
    )?;
    let d = params.dims;
    writeln!(w, "dims {} {} {} {}", d.d_in, d.d_u, d.d_v, d.d_f)?;
    for (name, block) in [
        ("w_h", &params.w_h),
        ("b_h", &params.b_h),
        ("w_s", &params.w_s),
        ("b_s", &params.b_s),
        ("w_f", &params.w_f),
        ("b_f", &params.b_f),
        ("w_o", &params.w_o),
        ("b_o", &params.b_o),
    ] {
        write!(w, "{name}")?;
        for v in block.iter() {
            write!(w, " {v}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

pub fn load_params<R: BufRead>(r: R, expected_schema: &str) -> Result<(FileHeader, MlpParams)> {
    let mut lines = r.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| CoreError::MalformedFile("empty parameter file".into()))??;
    let header = FileHeader::parse_text_line(&header_line)?;
    if header.schema != expected_schema {
        return Err(CoreError::SchemaMismatch {
            expected: expected_schema.into(),
            found: header.schema,
        });
    }
    let dims_line = lines
        .next()
        .ok_or_else(|| CoreError::MalformedFile("missing dims line".into()))??;
    let parts: Vec<&str> = dims_line.split_whitespace().collect();
    if parts.len() != 5 || parts[0] != "dims" {
        return Err(CoreError::MalformedFile(format!(
            "bad dims line: {dims_line:?}"
        )));
    }
    let parse_dim = |s: &str| -> Result<usize> {
        s.parse()
            .map_err(|_| CoreError::MalformedFile(format!("bad dimension {s:?}")))
    };
    let dims = MlpDims {
        d_in: parse_dim(parts[1])?,
        d_u: parse_dim(parts[2])?,
        d_v: parse_dim(parts[3])?,
        d_f: parse_dim(parts[4])?,
    };
    dims.validate()?;
    let mut params = MlpParams::zeros(dims);
    for (name, block) in [
        ("w_h", &mut params.w_h),
        ("b_h", &mut params.b_h),
        ("w_s", &mut params.w_s),
        ("b_s", &mut params.b_s),
        ("w_f", &mut params.w_f),
        ("b_f", &mut params.b_f),
        ("w_o", &mut params.w_o),
        ("b_o", &mut params.b_o),
    ] {
        let line = lines
            .next()
            .ok_or_else(|| CoreError::MalformedFile(format!("missing block {name}")))??;
        let mut fields = line.split_whitespace();
        let got = fields.next().unwrap_or("");
        if got != name {
            return Err(CoreError::MalformedFile(format!(
                "expected block {name}, found {got:?}"
            )));
        }
        let values: Vec<f64> = fields
            .map(|s| {
                s.parse()
                    .map_err(|_| CoreError::MalformedFile(format!("bad value {s:?} in {name}")))
            })
            .collect::<Result<_>>()?;
        if values.len() != block.len() {
            return Err(CoreError::MalformedFile(format!(
                "block {name} has {} values, want {}",
                values.len(),
                block.len()
            )));
        }
        block.copy_from_slice(&values);
    }
    Ok((header, params))
}
