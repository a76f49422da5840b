//! Latency model and run reports. Decoders count abstract work (draft
//! steps, target passes, scorer queries); this module converts those counts
//! into simulated cost under a timing profile, computes the closed-form
//! speedup a measured acceptance rate implies, and renders side-by-side
//! comparison tables. Wall-clock time is measured but kept out of the
//! serialized report so artifacts stay byte-reproducible.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::decode::{Decoder, GenerationRecord};
use crate::dist::TokenId;
use crate::error::{CoreError, Result};
use crate::par::{map_indexed, stream_rng};
use crate::utility::UtilityFn;
use crate::verify::acceptance_stats;

/// Relative per-step costs. The unit is arbitrary; only ratios matter.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct TimingProfile {
    /// Cost of one draft-model step.
    pub t_draft: f64,
    /// Cost of one target-model pass (verifying a block or sampling one
    /// token autoregressively).
    pub t_target: f64,
    /// Cost of one scorer query on a rejected candidate; zero treats the
    /// gate as free.
    pub classifier_cost: f64,
}

impl Default for TimingProfile {
    fn default() -> Self {
        Self {
            t_draft: 1.0,
            t_target: 4.0,
            classifier_cost: 0.0,
        }
    }
}

impl TimingProfile {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_draft > 0.0 && self.t_draft.is_finite()) {
            return Err(CoreError::InvalidConfig(format!(
                "t_draft must be positive, got {}",
                self.t_draft
            )));
        }
        if !(self.t_target > 0.0 && self.t_target.is_finite()) {
            return Err(CoreError::InvalidConfig(format!(
                "t_target must be positive, got {}",
                self.t_target
            )));
        }
        if !(self.classifier_cost >= 0.0 && self.classifier_cost.is_finite()) {
            return Err(CoreError::InvalidConfig(format!(
                "classifier_cost must be non-negative, got {}",
                self.classifier_cost
            )));
        }
        Ok(())
    }
}

/// Closed-form speedup over plain target decoding for acceptance rate `eta`
/// and block size `gamma`: a block emits `eta * gamma + 1` tokens on average
/// and costs `gamma` draft steps plus one target pass.
pub fn expected_speedup(eta: f64, gamma: usize, profile: &TimingProfile) -> f64 {
    let g = gamma as f64;
    ((eta * g + 1.0) * profile.t_target) / (g * profile.t_draft + profile.t_target)
}

/// Aggregated result of decoding a batch of contexts with one decoder.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunReport {
    pub decoder: String,
    pub contexts: usize,
    pub gamma: usize,
    pub profile: TimingProfile,
    /// Emitted tokens across all contexts.
    pub tokens: u64,
    /// Verified blocks (zero for non-speculative decoders).
    pub blocks: u64,
    pub draft_steps: u64,
    pub target_passes: u64,
    pub scored_rejections: u64,
    /// Accepted over proposed drafted tokens; absent without verification.
    pub eta: Option<f64>,
    /// Mean accepted tokens per size-`gamma` block (`gamma * eta`).
    pub tau: Option<f64>,
    /// Fraction of outputs the utility rule scores as successes.
    pub utility_mean: f64,
    /// Binomial standard error of `utility_mean`.
    pub utility_se: f64,
    /// Total simulated cost under the profile.
    pub sim_cost: f64,
    /// Tokens-per-cost advantage over plain target decoding.
    pub sim_speedup: f64,
    /// Closed-form speedup at the measured eta; equals `sim_speedup` when
    /// there is no eta to plug in.
    pub predicted_speedup: f64,
}

/// A report plus the raw per-context records and the measured wall time.
pub struct SimRun {
    pub report: RunReport,
    pub records: Vec<GenerationRecord>,
    pub wall_clock: Duration,
}

/// Decodes every context (in parallel when enabled, with per-context derived
/// seeds) and folds the work counters into a [`RunReport`].
pub fn simulate_run_detailed(
    decoder: &dyn Decoder,
    contexts: &[Vec<TokenId>],
    utility: &UtilityFn,
    gamma: usize,
    profile: &TimingProfile,
    seed: u64,
) -> Result<SimRun> {
    profile.validate()?;
    if contexts.is_empty() {
        return Err(CoreError::EmptyInput("no contexts to decode".into()));
    }
    let start = Instant::now();
    let records: Result<Vec<GenerationRecord>> = map_indexed(contexts.len(), |i| {
        let mut rng = stream_rng(seed, "simulate", i as u64);
        decoder.generate(&contexts[i], &mut rng)
    })
    .into_iter()
    .collect();
    let records = records?;
    let wall_clock = start.elapsed();

    let mut tokens = 0u64;
    let mut blocks = 0u64;
    let mut draft_steps = 0u64;
    let mut target_passes = 0u64;
    let mut scored_rejections = 0u64;
    let mut successes = 0u64;
    let mut outcomes = Vec::new();
    for (record, context) in records.iter().zip(contexts) {
        tokens += record.output.len() as u64;
        blocks += record.outcomes.len() as u64;
        draft_steps += record.draft_steps;
        target_passes += record.target_passes;
        scored_rejections += record.scored_rejections;
        if utility.utility(&record.output, context) {
            successes += 1;
        }
        outcomes.extend(record.outcomes.iter().cloned());
    }

    let n = contexts.len() as f64;
    let utility_mean = successes as f64 / n;
    let utility_se = (utility_mean * (1.0 - utility_mean) / n).sqrt();
    let (eta, tau) = if outcomes.is_empty() {
        (None, None)
    } else {
        let (tau, eta) = acceptance_stats(&outcomes, gamma)?;
        (Some(eta), Some(tau))
    };
    let sim_cost = draft_steps as f64 * profile.t_draft
        + target_passes as f64 * profile.t_target
        + scored_rejections as f64 * profile.classifier_cost;
    let sim_speedup = tokens as f64 * profile.t_target / sim_cost;
    let predicted_speedup = eta
        .map(|e| expected_speedup(e, gamma, profile))
        .unwrap_or(sim_speedup);

    Ok(SimRun {
        report: RunReport {
            decoder: decoder.id().to_string(),
            contexts: contexts.len(),
            gamma,
            profile: *profile,
            tokens,
            blocks,
            draft_steps,
            target_passes,
            scored_rejections,
            eta,
            tau,
            utility_mean,
            utility_se,
            sim_cost,
            sim_speedup,
            predicted_speedup,
        },
        records,
        wall_clock,
    })
}

/// [`simulate_run_detailed`] without the per-context records.
pub fn simulate_run(
    decoder: &dyn Decoder,
    contexts: &[Vec<TokenId>],
    utility: &UtilityFn,
    gamma: usize,
    profile: &TimingProfile,
    seed: u64,
) -> Result<RunReport> {
    Ok(simulate_run_detailed(decoder, contexts, utility, gamma, profile, seed)?.report)
}

fn opt_col(v: Option<f64>, width: usize, precision: usize) -> String {
    match v {
        Some(x) => format!("{x:>width$.precision$}"),
        None => format!("{:>width$}", "-"),
    }
}

/// Fixed-width comparison table over at least two reports, sorted by decoder
/// id so the rendering is independent of run order.
pub fn compare_report(reports: &[RunReport]) -> Result<String> {
    if reports.len() < 2 {
        return Err(CoreError::EmptyInput(
            "comparison needs at least two run reports".into(),
        ));
    }
    let mut sorted: Vec<&RunReport> = reports.iter().collect();
    sorted.sort_by(|a, b| a.decoder.cmp(&b.decoder));
    let mut out = String::new();
    out.push_str(&format!(
        "{:<12} {:>14} {:>7} {:>6} {:>8} {:>10}\n",
        "decoder", "utility", "eta", "tau", "speedup", "predicted"
    ));
    for r in sorted {
        out.push_str(&format!(
            "{:<12} {:>6.3} ±{:>5.3} {} {} {:>8.2} {:>10.2}\n",
            r.decoder,
            r.utility_mean,
            r.utility_se,
            opt_col(r.eta, 7, 3),
            opt_col(r.tau, 6, 2),
            r.sim_speedup,
            r.predicted_speedup,
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    use crate::decode::{DraftDecoder, SpeculativeDecoder, TargetDecoder};
    use crate::dist::GenerationParams;
    use crate::model::{
        make_synthetic_pair, sample_contexts, SequenceModel, SyntheticTaskSpec, TableModel,
    };
    use crate::utility::UtilityRule;
    use crate::verify::StandardPolicy;

    fn utility() -> UtilityFn {
        UtilityFn {
            rule: UtilityRule::Checksum { modulus: 3 },
            theta: 0.5,
        }
    }

    fn spec() -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            vocab_size: 6,
            order: 1,
            perturbation: 0.4,
            hidden_dim: 8,
            seed: 11,
            utility: utility(),
        }
    }

    #[test]
    fn test_expected_speedup_reference_points() {
        // With a 3.94x cost gap and blocks of ten, an acceptance rate of
        // 0.453 should land near 1.56x and 0.772 near 2.46x.
        let profile = TimingProfile {
            t_draft: 1.0,
            t_target: 3.94,
            classifier_cost: 0.0,
        };
        let low = expected_speedup(0.453, 10, &profile);
        assert!((1.54..=1.58).contains(&low), "got {low}");
        let high = expected_speedup(0.772, 10, &profile);
        assert!((2.44..=2.49).contains(&high), "got {high}");
        // Full acceptance is the ceiling.
        let ceil = expected_speedup(1.0, 10, &profile);
        assert!(high < ceil && ceil < 3.94 / 1.0);
    }

    #[test]
    fn test_target_decoder_speedup_is_exactly_one() {
        let (target, _) = make_synthetic_pair(&spec()).unwrap();
        let decoder = TargetDecoder {
            model: Arc::new(target),
            params: GenerationParams {
                max_len: 10,
                ..Default::default()
            },
        };
        let contexts = sample_contexts(6, 8, 2, 5);
        let report =
            simulate_run(&decoder, &contexts, &utility(), 4, &TimingProfile::default(), 1).unwrap();
        assert_eq!(report.sim_speedup, 1.0);
        assert_eq!(report.predicted_speedup, 1.0);
        assert_eq!(report.eta, None);
        assert_eq!(report.blocks, 0);
    }

    #[test]
    fn test_draft_decoder_speedup_is_cost_ratio() {
        let (_, draft) = make_synthetic_pair(&spec()).unwrap();
        let decoder = DraftDecoder {
            model: Arc::new(draft),
            params: GenerationParams {
                max_len: 10,
                ..Default::default()
            },
        };
        let contexts = sample_contexts(6, 8, 2, 5);
        let profile = TimingProfile {
            t_draft: 1.0,
            t_target: 4.0,
            classifier_cost: 0.0,
        };
        let report = simulate_run(&decoder, &contexts, &utility(), 4, &profile, 1).unwrap();
        assert_eq!(report.sim_speedup, 4.0);
    }

    /// Strips all EOS mass out of a table so generations always run the full
    /// budget; block accounting then matches the closed form closely.
    fn eos_free_pair() -> (TableModel, TableModel) {
        let (target, _) = make_synthetic_pair(&spec()).unwrap();
        let v = target.vocab_size();
        let rows: Vec<Vec<f64>> = (0..v)
            .map(|r| {
                let mut row = target.row(r).to_vec();
                row[0] = 0.0;
                let total: f64 = row.iter().sum();
                row.iter_mut().for_each(|p| *p /= total);
                row
            })
            .collect();
        let target = TableModel::from_rows(v, 1, rows, 8, 123).unwrap();
        let draft = target.mix_with_uniform(0.35).unwrap();
        (target, draft)
    }

    #[test]
    fn test_sim_cost_tracks_closed_form_without_eos() {
        let (target, draft) = eos_free_pair();
        let params = GenerationParams {
            max_len: 40,
            ..Default::default()
        };
        let decoder = SpeculativeDecoder::new(
            Arc::new(target),
            Arc::new(draft),
            4,
            params,
            Arc::new(StandardPolicy),
            "sd",
        );
        let contexts = sample_contexts(6, 30, 2, 9);
        let profile = TimingProfile::default();
        let report = simulate_run(&decoder, &contexts, &utility(), 4, &profile, 2).unwrap();
        let eta = report.eta.unwrap();
        assert!(eta > 0.0 && eta < 1.0);
        // Truncated final blocks introduce a small gap between the simulated
        // ratio and the closed form; they should still agree closely.
        let rel = (report.sim_speedup - report.predicted_speedup).abs() / report.predicted_speedup;
        assert!(
            rel < 0.15,
            "sim {} vs predicted {}",
            report.sim_speedup,
            report.predicted_speedup
        );
        // Draft proposes EOS sometimes; the target never emits it, so every
        // output runs to the budget.
        assert_eq!(report.tokens, 30 * 40);
    }

    #[test]
    fn test_compare_report_sorted_and_gated() {
        let (target, draft) = make_synthetic_pair(&spec()).unwrap();
        let params = GenerationParams {
            max_len: 10,
            ..Default::default()
        };
        let td = TargetDecoder {
            model: Arc::new(target.clone()),
            params: params.clone(),
        };
        let sd = SpeculativeDecoder::new(
            Arc::new(target),
            Arc::new(draft),
            4,
            params,
            Arc::new(StandardPolicy),
            "sd",
        );
        let contexts = sample_contexts(6, 8, 2, 5);
        let profile = TimingProfile::default();
        let a = simulate_run(&sd, &contexts, &utility(), 4, &profile, 1).unwrap();
        let b = simulate_run(&td, &contexts, &utility(), 4, &profile, 1).unwrap();
        assert!(matches!(
            compare_report(std::slice::from_ref(&a)),
            Err(CoreError::EmptyInput(_))
        ));
        let table = compare_report(&[a.clone(), b.clone()]).unwrap();
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 3);
        // Sorted by id: "sd" after "target"? No: lexicographically s < t.
        assert!(lines[1].starts_with("sd"));
        assert!(lines[2].starts_with("target"));
        // Same inputs, same bytes.
        assert_eq!(table, compare_report(&[b, a]).unwrap());
    }

    #[test]
    fn test_report_serialization_is_deterministic() {
        let (target, draft) = make_synthetic_pair(&spec()).unwrap();
        let params = GenerationParams {
            max_len: 10,
            ..Default::default()
        };
        let sd = SpeculativeDecoder::new(
            Arc::new(target),
            Arc::new(draft),
            4,
            params,
            Arc::new(StandardPolicy),
            "sd",
        );
        let contexts = sample_contexts(6, 8, 2, 5);
        let run = |seed| {
            let r = simulate_run(&sd, &contexts, &utility(), 4, &TimingProfile::default(), seed)
                .unwrap();
            serde_json::to_string_pretty(&r).unwrap()
        };
        assert_eq!(run(3), run(3));
        let parsed: RunReport = serde_json::from_str(&run(3)).unwrap();
        assert_eq!(parsed.decoder, "sd");
    }

    #[test]
    fn test_profile_validation() {
        assert!(TimingProfile::default().validate().is_ok());
        let bad = TimingProfile {
            t_draft: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = TimingProfile {
            classifier_cost: -1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
