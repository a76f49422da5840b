//! Stage implementations behind the subcommands. Each stage writes its
//! artifacts under the output directory together with an echo of the resolved
//! config, so a directory is a self-describing record of what produced it.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde::Serialize;

use pad_core::classifier::{
    auc_null_std_error, load_params, roc_auc, save_params, split_indices, train, TrainSample,
};
use pad_core::decode::{Decoder, DraftDecoder, SpeculativeDecoder, TargetDecoder};
use pad_core::format::{
    sha256_hex, write_jsonl, FileHeader, AUDIT_SCHEMA, BENCH_SCHEMA, LABELS_SCHEMA, PARAMS_SCHEMA,
    REPORT_SCHEMA, ROC_SCHEMA, TASK_SCHEMA, TRAIN_REPORT_SCHEMA,
};
use pad_core::gate::{GateConfig, MlpScorer, OracleScorer, PadPolicy, PivotScorer};
use pad_core::label::{harvest_and_label, read_labels, write_labels, Judge, NullJudge, RuleJudge};
use pad_core::model::{
    make_synthetic_pair, sample_contexts, SequenceModel, SyntheticTaskSpec, TableModel,
};
use pad_core::sim::{compare_report, simulate_run, simulate_run_detailed, RunReport};
use pad_core::utility::PivotOracleConfig;
use pad_core::verify::{AuditRecord, DecisionSource, StandardPolicy};
use pad_core::TokenId;

use crate::config::{AppConfig, JudgeKind};

// ---------------------------------------------------------------------------
// Shared plumbing
// ---------------------------------------------------------------------------

fn build_models(cfg: &AppConfig) -> Result<(Arc<TableModel>, Arc<TableModel>)> {
    let (target, draft) = make_synthetic_pair(&cfg.task)?;
    Ok((Arc::new(target), Arc::new(draft)))
}

fn task_contexts(cfg: &AppConfig) -> Vec<Vec<TokenId>> {
    sample_contexts(
        cfg.task.vocab_size,
        cfg.run.contexts,
        cfg.run.context_len,
        cfg.run.seed,
    )
}

/// Echoes the resolved config (defaults and overrides applied) next to the
/// artifacts it produced.
fn write_config_echo(cfg: &AppConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out)
        .with_context(|| format!("creating output directory {}", out.display()))?;
    let path = out.join("config.toml");
    std::fs::write(&path, cfg.to_toml()?)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| {
        format!("creating {}", path.display())
    })?))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).with_context(|| {
        format!("opening {}", path.display())
    })?))
}

/// `{"header": ..., "<key>": ...}` pretty-printed, for single-object files.
fn write_wrapped<T: Serialize>(
    path: &Path,
    header: &FileHeader,
    key: &str,
    value: &T,
) -> Result<()> {
    let mut doc = serde_json::Map::new();
    doc.insert("header".into(), serde_json::to_value(header)?);
    doc.insert(key.into(), serde_json::to_value(value)?);
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, &doc)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn fmt_opt(v: Option<f64>, precision: usize) -> String {
    match v {
        Some(x) => format!("{x:.precision$}"),
        None => "-".into(),
    }
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct TaskSummary {
    task: SyntheticTaskSpec,
    rows: usize,
    /// Mean total-variation distance between target and draft rows.
    mean_row_tv: f64,
    target_digest: String,
    draft_digest: String,
}

/// Content hash over the raw row probabilities, bit-exact.
fn table_digest(model: &TableModel, rows: usize) -> String {
    let mut bytes = Vec::with_capacity(rows * model.vocab_size() * 8);
    for i in 0..rows {
        for &p in model.row(i) {
            bytes.extend_from_slice(&p.to_bits().to_le_bytes());
        }
    }
    sha256_hex(&bytes)
}

/// Builds the model pair and records a fingerprint of both tables, so later
/// stages (or other machines) can confirm they reconstructed the same task.
pub fn cmd_synth(cfg: &AppConfig, out: &Path) -> Result<()> {
    write_config_echo(cfg, out)?;
    let (target, draft) = build_models(cfg)?;
    let rows = cfg.task.vocab_size.pow(cfg.task.order as u32);
    let mut tv_sum = 0.0;
    for i in 0..rows {
        let (t, d) = (target.row(i), draft.row(i));
        tv_sum += 0.5
            * t.iter()
                .zip(d)
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>();
    }
    let summary = TaskSummary {
        task: cfg.task.clone(),
        rows,
        mean_row_tv: tv_sum / rows as f64,
        target_digest: table_digest(&target, rows),
        draft_digest: table_digest(&draft, rows),
    };
    let header = FileHeader::new(TASK_SCHEMA, cfg.task.seed, cfg.digest());
    write_wrapped(&out.join("task.json"), &header, "summary", &summary)?;

    println!(
        "task: vocab {} order {} ({} rows), perturbation {}, mean row TV {:.4}",
        cfg.task.vocab_size, cfg.task.order, rows, cfg.task.perturbation, summary.mean_row_tv
    );
    println!("target table {}", &summary.target_digest[..16]);
    println!("draft table  {}", &summary.draft_digest[..16]);
    println!("wrote {}", out.join("task.json").display());
    Ok(())
}

// ---------------------------------------------------------------------------
// run
// ---------------------------------------------------------------------------

fn load_scorer(
    cfg: &AppConfig,
    target: Arc<TableModel>,
    classifier: Option<&Path>,
) -> Result<Arc<dyn PivotScorer>> {
    match classifier {
        Some(path) => {
            let (_, params) = load_params(open(path)?, PARAMS_SCHEMA)
                .with_context(|| format!("loading classifier {}", path.display()))?;
            Ok(Arc::new(MlpScorer {
                params,
                model: target,
            }))
        }
        // Without a trained classifier, score with the brute-force pivot
        // oracle: slower, but the gate's ceiling.
        None => Ok(Arc::new(OracleScorer {
            model: target,
            utility: cfg.task.utility.clone(),
            oracle: PivotOracleConfig {
                epsilon: 0.0,
                n_rollouts: cfg.label.rollouts,
                params: cfg.generation.clone(),
            },
            seed: cfg.run.seed,
        })),
    }
}

fn build_decoder(
    cfg: &AppConfig,
    target: Arc<TableModel>,
    draft: Arc<TableModel>,
    name: &str,
    sigma: Option<f64>,
    classifier: Option<&Path>,
) -> Result<Box<dyn Decoder>> {
    if name != "pad" && (sigma.is_some() || classifier.is_some()) {
        bail!("--sigma and --classifier only apply to the pad decoder");
    }
    let params = cfg.generation.clone();
    Ok(match name {
        "target" => Box::new(TargetDecoder {
            model: target,
            params,
        }),
        "draft" => Box::new(DraftDecoder {
            model: draft,
            params,
        }),
        "sd" => Box::new(SpeculativeDecoder::new(
            target,
            draft,
            cfg.run.gamma,
            params,
            Arc::new(StandardPolicy),
            "sd",
        )),
        "pad" => {
            let gate = GateConfig {
                sigma: sigma.unwrap_or(cfg.gate.sigma),
                ..cfg.gate
            };
            gate.validate()?;
            let scorer = load_scorer(cfg, target.clone(), classifier)?;
            let id = format!("pad@{:.2}", gate.sigma);
            Box::new(SpeculativeDecoder::new(
                target,
                draft,
                cfg.run.gamma,
                params,
                Arc::new(PadPolicy::new(scorer, gate)),
                id,
            ))
        }
        other => bail!("unknown decoder '{other}' (expected target, draft, sd, or pad)"),
    })
}

fn audit_rows(records: &[pad_core::decode::GenerationRecord]) -> Vec<AuditRecord> {
    let mut rows = Vec::new();
    for (ctx, record) in records.iter().enumerate() {
        for (block, outcome) in record.outcomes.iter().enumerate() {
            for r in &outcome.records {
                rows.push(AuditRecord::from_position(ctx as u64, block as u64, r));
            }
        }
    }
    rows
}

/// Decodes the corpus with one decoder and writes the run report plus a
/// per-decision audit trail.
pub fn cmd_run(
    cfg: &AppConfig,
    out: &Path,
    decoder_name: &str,
    sigma: Option<f64>,
    classifier: Option<&Path>,
) -> Result<()> {
    write_config_echo(cfg, out)?;
    let (target, draft) = build_models(cfg)?;
    let contexts = task_contexts(cfg);
    let decoder = build_decoder(cfg, target, draft, decoder_name, sigma, classifier)?;

    let run = simulate_run_detailed(
        decoder.as_ref(),
        &contexts,
        &cfg.task.utility,
        cfg.run.gamma,
        &cfg.timing,
        cfg.run.seed,
    )?;
    let id = run.report.decoder.clone();

    let report_path = out.join(format!("report-{id}.json"));
    let header = FileHeader::new(REPORT_SCHEMA, cfg.run.seed, cfg.digest());
    write_wrapped(&report_path, &header, "report", &run.report)?;

    let audit = audit_rows(&run.records);
    let audit_path = out.join(format!("audit-{id}.jsonl"));
    let mut w = create(&audit_path)?;
    write_jsonl(
        &mut w,
        &FileHeader::new(AUDIT_SCHEMA, cfg.run.seed, cfg.digest()),
        audit.iter(),
    )?;
    w.flush()?;

    let overrides = audit
        .iter()
        .filter(|r| r.source == DecisionSource::PadOverride)
        .count();
    let r = &run.report;
    println!(
        "{}: {} contexts, {} tokens, {} blocks",
        id, r.contexts, r.tokens, r.blocks
    );
    println!(
        "  eta {}  tau {}  sim speedup {:.3}  predicted {:.3}  utility {:.3} +/- {:.3}",
        fmt_opt(r.eta, 4),
        fmt_opt(r.tau, 3),
        r.sim_speedup,
        r.predicted_speedup,
        r.utility_mean,
        r.utility_se
    );
    if r.scored_rejections > 0 {
        println!(
            "  gate overrides {overrides} of {} scored rejections",
            r.scored_rejections
        );
    }
    println!(
        "  wrote {}, {} ({:.2} s)",
        report_path.display(),
        audit_path.display(),
        run.wall_clock.as_secs_f64()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// label
// ---------------------------------------------------------------------------

/// Harvests rejected draft candidates under standard decoding and labels
/// each one pivot / non-pivot by continuation utility.
pub fn cmd_label(cfg: &AppConfig, out: &Path) -> Result<()> {
    write_config_echo(cfg, out)?;
    let (target, draft) = build_models(cfg)?;
    let contexts = task_contexts(cfg);
    let judge: Box<dyn Judge> = match cfg.label.judge {
        JudgeKind::Rule => Box::new(RuleJudge {
            rule: cfg.task.utility.rule.clone(),
        }),
        JudgeKind::None => Box::new(NullJudge),
    };

    let start = Instant::now();
    let result = harvest_and_label(
        target.as_ref(),
        draft.as_ref(),
        &contexts,
        &cfg.task.utility,
        &cfg.label_config(),
        judge.as_ref(),
    )?;
    let elapsed = start.elapsed();

    let header = FileHeader::new(LABELS_SCHEMA, cfg.label.seed, cfg.digest());
    let labels_path = out.join("labels.jsonl");
    let mut w = create(&labels_path)?;
    write_labels(&mut w, &header, &result)?;
    w.flush()?;

    let audit_path = out.join("label-audit.jsonl");
    let mut w = create(&audit_path)?;
    write_jsonl(
        &mut w,
        &FileHeader::new(AUDIT_SCHEMA, cfg.label.seed, cfg.digest()),
        result.audit.iter(),
    )?;
    w.flush()?;

    let flips = result.samples.iter().filter(|s| s.judge_flipped).count();
    println!(
        "{} contexts -> {} rejected candidates, {} pivots ({:.1}%), {} judge flips",
        contexts.len(),
        result.samples.len(),
        result.pivots(),
        100.0 * result.pivots() as f64 / result.samples.len().max(1) as f64,
        flips
    );
    if result.truncated_contexts > 0 {
        println!("  {} contexts hit the sample cap", result.truncated_contexts);
    }
    println!(
        "  wrote {}, {} ({:.2} s)",
        labels_path.display(),
        audit_path.display(),
        elapsed.as_secs_f64()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn read_label_file(path: &Path) -> Result<(FileHeader, Vec<TrainSample>, usize)> {
    let (header, samples, _) = read_labels(open(path)?)?;
    let pivots = samples
        .iter()
        .filter(|s| s.label == pad_core::label::Label::Pivot)
        .count();
    let train_samples = samples.iter().map(|s| s.to_train_sample()).collect();
    Ok((header, train_samples, pivots))
}

/// Trains the pivot classifier on a labels file and saves the best-epoch
/// parameters.
pub fn cmd_train(cfg: &AppConfig, out: &Path, labels: &Path) -> Result<()> {
    write_config_echo(cfg, out)?;
    let (lheader, samples, pivots) = read_label_file(labels)?;
    if lheader.config_digest != cfg.digest() {
        log::warn!(
            "labels were produced under config {} (this config is {})",
            lheader.config_digest,
            cfg.digest()
        );
    }
    println!(
        "training on {} samples ({} pivot, {} non-pivot)",
        samples.len(),
        pivots,
        samples.len() - pivots
    );

    let start = Instant::now();
    let (params, report) = train(&samples, &cfg.train)?;
    let elapsed = start.elapsed();

    let params_path = out.join("classifier.txt");
    let header = FileHeader::new(PARAMS_SCHEMA, cfg.train.seed, cfg.digest());
    let mut w = create(&params_path)?;
    save_params(&mut w, &params, &header)?;
    w.flush()?;

    let report_path = out.join("train-report.json");
    write_wrapped(
        &report_path,
        &FileHeader::new(TRAIN_REPORT_SCHEMA, cfg.train.seed, cfg.digest()),
        "report",
        &report,
    )?;

    let best = &report.epochs[report.best_epoch];
    println!(
        "  split {}/{} (train/val), class weights ({:.3}, {:.3})",
        report.train_size, report.val_size, report.class_weights.0, report.class_weights.1
    );
    println!(
        "  best epoch {}: train loss {:.4}, val loss {:.4}",
        report.best_epoch, best.train_loss, best.val_loss
    );
    println!(
        "  wrote {}, {} ({:.2} s)",
        params_path.display(),
        report_path.display(),
        elapsed.as_secs_f64()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

/// Scores the trainer's held-out split with a saved classifier and writes
/// the ROC curve. The split is recomputed from `[train]` settings, so eval
/// sees exactly the samples the trainer never touched.
pub fn cmd_eval(cfg: &AppConfig, out: &Path, labels: &Path, classifier: &Path) -> Result<()> {
    write_config_echo(cfg, out)?;
    let (_, samples, _) = read_label_file(labels)?;
    let (pheader, params) = load_params(open(classifier)?, PARAMS_SCHEMA)?;
    if pheader.config_digest != cfg.digest() {
        log::warn!(
            "classifier was trained under config {} (this config is {})",
            pheader.config_digest,
            cfg.digest()
        );
    }

    let (_, val_idx) = split_indices(samples.len(), cfg.train.split, cfg.train.seed);
    let val: Vec<TrainSample> = val_idx.iter().map(|&i| samples[i].clone()).collect();
    let pivots = val.iter().filter(|s| s.pivot).count();
    let non_pivots = val.len() - pivots;
    if pivots == 0 || non_pivots == 0 {
        bail!(
            "held-out split has {pivots} pivots and {non_pivots} non-pivots; \
             need both classes to rank (label more contexts)"
        );
    }

    let curve = roc_auc(&params, &val)?;
    let null_se = auc_null_std_error(pivots, non_pivots);

    let roc_path = out.join("roc.csv");
    let header = FileHeader::new(ROC_SCHEMA, cfg.train.seed, cfg.digest());
    let mut w = create(&roc_path)?;
    writeln!(w, "# {}", header.to_text_line())?;
    writeln!(
        w,
        "# auc={:.7} pivots={} non_pivots={} null_se={:.7}",
        curve.auc, pivots, non_pivots, null_se
    )?;
    writeln!(w, "fpr,tpr")?;
    for (fpr, tpr) in &curve.points {
        writeln!(w, "{fpr:.7},{tpr:.7}")?;
    }
    w.flush()?;

    println!(
        "held-out AUC {:.4} over {} samples ({} pivot, {} non-pivot)",
        curve.auc,
        val.len(),
        pivots,
        non_pivots
    );
    println!(
        "  chance-level std error {:.4}; AUC - 0.5 = {:+.4} ({:+.1} SEs)",
        null_se,
        curve.auc - 0.5,
        (curve.auc - 0.5) / null_se
    );
    println!("  wrote {}", roc_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

/// Runs every decoder (target, draft, the standard speculative baseline, and
/// the gated decoder at each configured threshold) over one corpus and
/// writes a side-by-side table.
pub fn cmd_bench(cfg: &AppConfig, out: &Path, classifier: Option<&Path>) -> Result<()> {
    write_config_echo(cfg, out)?;
    let (target, draft) = build_models(cfg)?;
    let contexts = task_contexts(cfg);

    let mut specs: Vec<(String, Option<f64>)> = vec![
        ("target".into(), None),
        ("draft".into(), None),
        ("sd".into(), None),
    ];
    for &sigma in &cfg.bench.sigmas {
        specs.push(("pad".into(), Some(sigma)));
    }

    let start = Instant::now();
    let mut reports: Vec<RunReport> = Vec::new();
    for (name, sigma) in &specs {
        let cls = if name == "pad" { classifier } else { None };
        let decoder = build_decoder(cfg, target.clone(), draft.clone(), name, *sigma, cls)?;
        reports.push(simulate_run(
            decoder.as_ref(),
            &contexts,
            &cfg.task.utility,
            cfg.run.gamma,
            &cfg.timing,
            cfg.run.seed,
        )?);
    }
    let elapsed = start.elapsed();

    let table = compare_report(&reports)?;
    let header = FileHeader::new(BENCH_SCHEMA, cfg.run.seed, cfg.digest());

    let table_path = out.join("bench.txt");
    let mut w = create(&table_path)?;
    writeln!(w, "# {}", header.to_text_line())?;
    write!(w, "{table}")?;
    w.flush()?;

    let rows_path = out.join("bench.jsonl");
    let mut w = create(&rows_path)?;
    write_jsonl(&mut w, &header, reports.iter())?;
    w.flush()?;

    print!("{table}");
    println!(
        "wrote {}, {} ({:.2} s)",
        table_path.display(),
        rows_path.display(),
        elapsed.as_secs_f64()
    );
    Ok(())
}
