//! Cross-module flows at desk scale: harvested labels against the
//! brute-force pivot oracle, paired decoding with a closed and an open gate,
//! the utility-preservation check on two decoders that provably share a law,
//! and frozen digests that pin artifact bytes across feature builds.

use std::sync::Arc;

use pad_core::classifier::{inverse_frequency_weights, roc_auc, save_params, train, TrainConfig};
use pad_core::decode::{Decoder, SpeculativeDecoder, TargetDecoder};
use pad_core::dist::GenerationParams;
use pad_core::format::{sha256_hex, FileHeader, LABELS_SCHEMA};
use pad_core::gate::{ConstScorer, GateConfig, OracleScorer, PadPolicy};
use pad_core::label::{harvest_and_label, write_labels, Label, LabelConfig, NullJudge};
use pad_core::model::{make_synthetic_pair, sample_contexts, SyntheticTaskSpec};
use pad_core::par::stream_rng;
use pad_core::sim::{simulate_run, TimingProfile};
use pad_core::utility::{
    check_utility_preservation, is_pivot_oracle, PivotOracleConfig, UtilityFn, UtilityRule,
};
use pad_core::verify::StandardPolicy;
use pad_core::TokenId;

fn task_spec(seed: u64) -> SyntheticTaskSpec {
    SyntheticTaskSpec {
        vocab_size: 4,
        order: 1,
        perturbation: 0.5,
        hidden_dim: 6,
        seed,
        utility: UtilityFn {
            rule: UtilityRule::Checksum { modulus: 4 },
            theta: 0.5,
        },
    }
}

fn short_params() -> GenerationParams {
    // 4^6 = 4096 continuations: every estimate in this file is exact.
    GenerationParams {
        max_len: 6,
        ..Default::default()
    }
}

/// With exact utility estimates and `alpha = 1`, the pipeline's strict rule
/// `U_cand < U_base` and the oracle's tie-counting rule `U_cand <= U_base`
/// may only disagree on exact ties.
#[test]
fn harvested_labels_match_the_pivot_oracle_up_to_ties() {
    let spec = task_spec(17);
    let (target, draft) = make_synthetic_pair(&spec).unwrap();
    let contexts = sample_contexts(spec.vocab_size, 60, 2, 91);
    let cfg = LabelConfig {
        alpha: 1.0,
        params: short_params(),
        max_steps: 10,
        seed: 5,
        ..Default::default()
    };
    let result =
        harvest_and_label(&target, &draft, &contexts, &spec.utility, &cfg, &NullJudge).unwrap();
    assert!(result.samples.len() >= 30, "got {}", result.samples.len());

    let oracle_cfg = PivotOracleConfig {
        epsilon: 0.0,
        n_rollouts: 8,
        params: short_params(),
    };
    let mut ties = 0;
    for s in &result.samples {
        let context = &contexts[s.context_id as usize];
        let mut rng = stream_rng(0, "unused-exact-path", 0);
        let oracle_pivot = is_pivot_oracle(
            &target,
            context,
            &s.prefix,
            s.candidate,
            &spec.utility,
            &oracle_cfg,
            &mut rng,
        )
        .unwrap();
        let pipeline_pivot = s.label == Label::Pivot;
        if oracle_pivot != pipeline_pivot {
            assert!(
                (s.u_cand_hat - s.u_base_hat).abs() <= 1e-12,
                "disagreement off a tie: base {} cand {}",
                s.u_base_hat,
                s.u_cand_hat
            );
            ties += 1;
        }
    }
    // Ties exist on this config (checksum utilities are coarse); the point
    // is they are the *only* disagreements.
    assert!(ties < result.samples.len() / 2);
}

/// A closed gate must reproduce plain speculative decoding byte for byte:
/// the scorer consumes no randomness, so the coin streams stay aligned.
#[test]
fn closed_gate_decodes_identically_to_standard() {
    let spec = task_spec(29);
    let (target, draft) = make_synthetic_pair(&spec).unwrap();
    let (target, draft) = (Arc::new(target), Arc::new(draft));
    let params = GenerationParams {
        max_len: 20,
        ..Default::default()
    };
    let sd = SpeculativeDecoder::new(
        target.clone(),
        draft.clone(),
        4,
        params.clone(),
        Arc::new(StandardPolicy),
        "sd",
    );
    let closed = SpeculativeDecoder::new(
        target,
        draft,
        4,
        params,
        Arc::new(PadPolicy::new(
            Arc::new(ConstScorer(0.0)),
            GateConfig {
                sigma: 0.0,
                ..Default::default()
            },
        )),
        "pad-closed",
    );
    for (i, context) in sample_contexts(4, 12, 2, 3).iter().enumerate() {
        let mut rng_a = stream_rng(77, "paired", i as u64);
        let mut rng_b = stream_rng(77, "paired", i as u64);
        let a = sd.generate(context, &mut rng_a).unwrap();
        let b = closed.generate(context, &mut rng_b).unwrap();
        assert_eq!(a.output, b.output, "context {i}");
        assert_eq!(a.draft_steps, b.draft_steps);
        assert_eq!(a.target_passes, b.target_passes);
    }
}

/// A wide-open gate accepts more than the standard rule on the same task.
#[test]
fn open_gate_raises_acceptance_on_policy() {
    let spec = task_spec(29);
    let (target, draft) = make_synthetic_pair(&spec).unwrap();
    let (target, draft) = (Arc::new(target), Arc::new(draft));
    let params = GenerationParams {
        max_len: 20,
        ..Default::default()
    };
    let contexts = sample_contexts(4, 40, 2, 13);
    let profile = TimingProfile::default();
    let mk = |policy, id: &str| {
        SpeculativeDecoder::new(target.clone(), draft.clone(), 4, params.clone(), policy, id)
    };
    let sd = mk(Arc::new(StandardPolicy), "sd");
    let open = mk(
        Arc::new(PadPolicy::new(
            Arc::new(ConstScorer(0.0)),
            GateConfig {
                sigma: 0.9,
                ..Default::default()
            },
        )),
        "pad-open",
    );
    let r_sd = simulate_run(&sd, &contexts, &spec.utility, 4, &profile, 21).unwrap();
    let r_open = simulate_run(&open, &contexts, &spec.utility, 4, &profile, 21).unwrap();
    let (eta_sd, eta_open) = (r_sd.eta.unwrap(), r_open.eta.unwrap());
    assert!(
        eta_open > eta_sd + 0.05,
        "open gate eta {eta_open} vs standard {eta_sd}"
    );
    assert!(r_open.sim_speedup > r_sd.sim_speedup);
    // The open gate consulted its scorer; the standard rule never does.
    assert!(r_open.scored_rejections > 0);
    assert_eq!(r_sd.scored_rejections, 0);
}

/// Standard speculative decoding samples the target law, so comparing it
/// against plain target decoding must pass the preservation check with no
/// tolerance beyond the statistical one.
#[test]
fn preservation_check_passes_for_two_target_law_decoders() {
    let spec = task_spec(41);
    let (target, draft) = make_synthetic_pair(&spec).unwrap();
    let (target, draft) = (Arc::new(target), Arc::new(draft));
    let params = GenerationParams {
        max_len: 8,
        ..Default::default()
    };
    let sd = SpeculativeDecoder::new(
        target.clone(),
        draft,
        4,
        params.clone(),
        Arc::new(StandardPolicy),
        "sd",
    );
    let plain = TargetDecoder {
        model: target,
        params,
    };
    let contexts = sample_contexts(4, 60, 2, 7);
    let report =
        check_utility_preservation(&sd, &plain, &contexts, &spec.utility, 8, 0.0, 213).unwrap();
    assert!(report.holds, "gap {} ± {}", report.gap, report.gap_std_error);
    assert!(report.gap.abs() < 3.0 * report.gap_std_error.max(1e-9));
}

/// An exact-oracle gate with zero tolerance should also clear the
/// preservation check against the target — the climb-down guarantee.
#[test]
fn oracle_gate_preserves_utility_at_small_scale() {
    let spec = task_spec(53);
    let (target, draft) = make_synthetic_pair(&spec).unwrap();
    let (target, draft) = (Arc::new(target), Arc::new(draft));
    let params = short_params();
    let scorer = OracleScorer {
        model: target.clone(),
        utility: spec.utility.clone(),
        oracle: PivotOracleConfig {
            epsilon: 0.0,
            n_rollouts: 8,
            params: params.clone(),
        },
        seed: 99,
    };
    let pad = SpeculativeDecoder::new(
        target.clone(),
        draft,
        4,
        params.clone(),
        Arc::new(PadPolicy::new(
            Arc::new(scorer),
            GateConfig {
                sigma: 0.5,
                ..Default::default()
            },
        )),
        "pad-oracle",
    );
    let plain = TargetDecoder {
        model: target,
        params,
    };
    let contexts = sample_contexts(4, 50, 2, 31);
    let report =
        check_utility_preservation(&pad, &plain, &contexts, &spec.utility, 8, 0.0, 401).unwrap();
    assert!(report.holds, "gap {} ± {}", report.gap, report.gap_std_error);
}

/// End-to-end harvest, train, and rank: the learned scorer must order the
/// harvested set far better than chance.
///
/// Learnability needs the pivot signal to be visible in the features. A
/// substring task makes it local — killing a pending first-token is what a
/// pivot mostly is — and an order-2 window puts that pending state into the
/// hidden features. (A checksum task with an order-1 window is close to
/// unlearnable by construction: the label depends on the whole-prefix
/// residue, the features only on the last token.)
#[test]
fn harvest_then_train_produces_a_working_ranker() {
    let spec = SyntheticTaskSpec {
        vocab_size: 4,
        order: 2,
        perturbation: 0.5,
        hidden_dim: 6,
        seed: 61,
        utility: UtilityFn {
            rule: UtilityRule::Substring {
                first: TokenId(2),
                second: TokenId(3),
            },
            theta: 0.5,
        },
    };
    let (target, draft) = make_synthetic_pair(&spec).unwrap();
    let contexts = sample_contexts(spec.vocab_size, 60, 2, 19);
    let cfg = LabelConfig {
        params: short_params(),
        max_steps: 10,
        seed: 23,
        ..Default::default()
    };
    let result =
        harvest_and_label(&target, &draft, &contexts, &spec.utility, &cfg, &NullJudge).unwrap();
    let samples: Vec<_> = result.samples.iter().map(|s| s.to_train_sample()).collect();
    let pivots = samples.iter().filter(|s| s.pivot).count();
    assert!(
        pivots > 5 && pivots < samples.len() - 5,
        "{pivots} pivots of {}",
        samples.len()
    );

    let train_cfg = TrainConfig {
        epochs: 200,
        learning_rate: 0.05,
        class_weights: Some(inverse_frequency_weights(samples.len() - pivots, pivots)),
        ..Default::default()
    };
    let (params, report) = train(&samples, &train_cfg).unwrap();
    assert!(report.best_epoch < report.epochs.len());
    let roc = roc_auc(&params, &samples).unwrap();
    assert!(roc.auc > 0.65, "AUC {} on the training pool", roc.auc);
}

/// Byte-level pins for the three serialized artifacts. The digests were
/// produced by this test and frozen; they must not move across runs, thread
/// counts, or the parallel/sequential feature builds. (They do pin libm
/// rounding, so they are only meaningful on one toolchain at a time.)
#[test]
fn artifact_digests_are_frozen() {
    let spec = task_spec(67);
    let (target, draft) = make_synthetic_pair(&spec).unwrap();
    let contexts = sample_contexts(spec.vocab_size, 16, 2, 43);
    let cfg = LabelConfig {
        params: short_params(),
        max_steps: 8,
        seed: 11,
        ..Default::default()
    };
    let result =
        harvest_and_label(&target, &draft, &contexts, &spec.utility, &cfg, &NullJudge).unwrap();
    let mut labels_bytes = Vec::new();
    write_labels(
        &mut labels_bytes,
        &FileHeader::new(LABELS_SCHEMA, 11, "pin"),
        &result,
    )
    .unwrap();

    let samples: Vec<_> = result.samples.iter().map(|s| s.to_train_sample()).collect();
    let train_cfg = TrainConfig {
        epochs: 10,
        ..Default::default()
    };
    let (params, _) = train(&samples, &train_cfg).unwrap();
    let mut params_bytes = Vec::new();
    save_params(&mut params_bytes, &params, &FileHeader::new("pad.mlp.v1", 11, "pin")).unwrap();

    assert_eq!(
        sha256_hex(&labels_bytes),
        "4c75ec61a86446a69921ee59dc1e9399c31fb904a9aebee64b69b31b0c3ede38",
        "labels artifact drifted"
    );
    assert_eq!(
        sha256_hex(&params_bytes),
        "62d10a1dcb02c2066630be1eee96c8fa549e5e484094c7a64823971f37b3a571",
        "classifier artifact drifted"
    );
}
