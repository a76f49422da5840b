//! `pad` — pipeline driver for the gated speculative decoding engine.
//!
//! The pipeline runs in stages, each a subcommand reading one TOML config
//! and writing artifacts into an output directory:
//!
//! ```text
//! pad synth  --config task.toml --out runs/a          # model pair fingerprint
//! pad run    --config task.toml --out runs/a --decoder sd
//! pad label  --config task.toml --out runs/a          # labels.jsonl
//! pad train  --config task.toml --out runs/a --labels runs/a/labels.jsonl
//! pad eval   --config task.toml --out runs/a --labels ... --classifier ...
//! pad run    --config task.toml --out runs/a --decoder pad --sigma 0.5 \
//!            --classifier runs/a/classifier.txt
//! pad bench  --config task.toml --out runs/a --classifier ...
//! ```
//!
//! Every artifact carries a digest of the fully resolved config; reruns with
//! the same config and seeds are byte-identical.

mod commands;
mod config;

use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use config::AppConfig;

#[derive(Parser)]
#[command(name = "pad", version, about = "speculative decoding with a pivot-aware gate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML config; missing sections fall back to defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory artifacts are written into.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the run, label, and train seeds at once (the task seed is
    /// part of the task identity and stays put).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for the data-parallel stages; 0 or absent leaves the
    /// default. Results never depend on this.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Build the synthetic model pair and fingerprint it.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Decode the corpus with one decoder; writes report and audit trail.
    Run {
        #[command(flatten)]
        common: Common,
        /// target | draft | sd | pad
        #[arg(long, default_value = "sd")]
        decoder: String,
        /// Gate threshold; pad only. Defaults to the config's [gate] sigma.
        #[arg(long)]
        sigma: Option<f64>,
        /// Drafted tokens per block.
        #[arg(long)]
        gamma: Option<usize>,
        /// Trained scorer for the gate; pad only. Without it the gate runs
        /// on the brute-force oracle.
        #[arg(long)]
        classifier: Option<PathBuf>,
    },
    /// Harvest rejected candidates and label them pivot / non-pivot.
    Label {
        #[command(flatten)]
        common: Common,
        /// Utility-drop factor below which a candidate counts as a pivot.
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Train the pivot classifier on a labels file.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        labels: PathBuf,
    },
    /// Score the trainer's held-out split; writes the ROC curve.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        classifier: PathBuf,
    },
    /// Compare all decoders side by side over one corpus.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Scorer for the gated rows; oracle-backed when absent.
        #[arg(long)]
        classifier: Option<PathBuf>,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Synth { common }
            | Command::Run { common, .. }
            | Command::Label { common, .. }
            | Command::Train { common, .. }
            | Command::Eval { common, .. }
            | Command::Bench { common, .. } => common,
        }
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let common = cli.command.common();

    if let Some(jobs) = common.jobs {
        if jobs > 0 {
            pad_core::par::configure_threads(jobs)?;
        }
    }

    let mut cfg = match &common.config {
        Some(path) => AppConfig::load(path)?,
        None => AppConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.run.seed = seed;
        cfg.label.seed = seed;
        cfg.train.seed = seed;
    }

    // Command-line overrides land in the config *before* the digest is
    // taken, so artifacts reflect what actually ran.
    match &cli.command {
        Command::Run { gamma, .. } => {
            if let Some(g) = *gamma {
                cfg.run.gamma = g;
            }
        }
        Command::Label { alpha, .. } => {
            if let Some(a) = *alpha {
                cfg.label.alpha = a;
            }
        }
        _ => {}
    }
    cfg.validate()?;

    let out = common.out.clone();
    match &cli.command {
        Command::Synth { .. } => commands::cmd_synth(&cfg, &out),
        Command::Run {
            decoder,
            sigma,
            classifier,
            ..
        } => commands::cmd_run(&cfg, &out, decoder, *sigma, classifier.as_deref()),
        Command::Label { .. } => commands::cmd_label(&cfg, &out),
        Command::Train { labels, .. } => commands::cmd_train(&cfg, &out, labels),
        Command::Eval {
            labels, classifier, ..
        } => commands::cmd_eval(&cfg, &out, labels, classifier),
        Command::Bench { classifier, .. } => commands::cmd_bench(&cfg, &out, classifier.as_deref()),
    }
}
