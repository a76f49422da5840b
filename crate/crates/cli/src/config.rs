//! One TOML file drives every stage. Sections are independent and all have
//! defaults, so a config can be as small as an empty file; commands echo the
//! fully resolved config back out so artifacts pin the exact settings,
//! including command-line overrides, via a digest in every file header.

use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use pad_core::classifier::TrainConfig;
use pad_core::dist::GenerationParams;
use pad_core::format::sha256_hex;
use pad_core::gate::GateConfig;
use pad_core::label::LabelConfig;
use pad_core::model::SyntheticTaskSpec;
use pad_core::sim::TimingProfile;
use pad_core::utility::{UtilityFn, UtilityRule};
use pad_core::TokenId;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub task: SyntheticTaskSpec,
    pub generation: GenerationParams,
    pub run: RunSection,
    pub gate: GateConfig,
    pub label: LabelSection,
    pub train: TrainConfig,
    pub timing: TimingProfile,
    pub bench: BenchSection,
}

/// Decode-stage settings: how many task contexts to draw and how to block
/// the drafting.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub contexts: usize,
    pub context_len: usize,
    pub gamma: usize,
    pub seed: u64,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            contexts: 200,
            context_len: 2,
            gamma: 10,
            seed: 1,
        }
    }
}

/// Which soundness judge reviews non-pivot labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeKind {
    /// Deterministic heuristics matched to the utility rule.
    Rule,
    /// No judge stage.
    None,
}

/// Harvest-stage settings; sampling controls come from `[generation]`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct LabelSection {
    pub alpha: f64,
    pub rollouts: usize,
    pub max_steps: usize,
    pub max_samples_per_context: Option<usize>,
    pub exact_when_enumerable: bool,
    pub judge: JudgeKind,
    pub seed: u64,
}

impl Default for LabelSection {
    fn default() -> Self {
        Self {
            alpha: 0.8,
            rollouts: 8,
            max_steps: 24,
            max_samples_per_context: None,
            exact_when_enumerable: true,
            judge: JudgeKind::Rule,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    /// Gate thresholds compared side by side, one decoder row each.
    pub sigmas: Vec<f64>,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            sigmas: vec![0.7, 0.5, 0.3],
        }
    }
}

impl Default for AppConfig {
    fn default() -> Self {
        Self {
            // A pair where pivotness is learnable from the features: the
            // utility watches for an adjacent token pair, and the order-2
            // window puts the pending-match state into the hidden features.
            task: SyntheticTaskSpec {
                vocab_size: 6,
                order: 2,
                perturbation: 0.45,
                hidden_dim: 12,
                seed: 7,
                utility: UtilityFn {
                    rule: UtilityRule::Substring {
                        first: TokenId(2),
                        second: TokenId(3),
                    },
                    theta: 0.5,
                },
            },
            generation: GenerationParams::default(),
            run: RunSection::default(),
            gate: GateConfig::default(),
            label: LabelSection::default(),
            train: TrainConfig::default(),
            timing: TimingProfile::default(),
            bench: BenchSection::default(),
        }
    }
}

impl AppConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: Self =
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.generation.validate()?;
        self.gate.validate()?;
        self.timing.validate()?;
        self.label_config().validate()?;
        if self.run.contexts == 0 || self.run.gamma == 0 {
            anyhow::bail!("[run] contexts and gamma must be positive");
        }
        if self.run.context_len == 0 {
            anyhow::bail!("[run] context_len must be positive");
        }
        for &s in &self.bench.sigmas {
            GateConfig {
                sigma: s,
                ..self.gate
            }
            .validate()
            .with_context(|| format!("[bench] sigma {s}"))?;
        }
        Ok(())
    }

    /// The harvest config implied by the `[label]` and `[generation]`
    /// sections.
    pub fn label_config(&self) -> LabelConfig {
        LabelConfig {
            alpha: self.label.alpha,
            n_rollouts: self.label.rollouts,
            max_steps: self.label.max_steps,
            max_samples_per_context: self.label.max_samples_per_context,
            exact_when_enumerable: self.label.exact_when_enumerable,
            params: self.generation.clone(),
            seed: self.label.seed,
        }
    }

    /// Digest of the fully resolved config (after overrides), stamped into
    /// every artifact header so mixed-config pipelines fail loudly.
    pub fn digest(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        sha256_hex(&canonical)[..16].to_string()
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }
}
