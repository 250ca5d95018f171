//! Command implementations behind the `mone` binary.
//!
//! Every command is deterministic for a fixed config: outputs are
//! byte-stable, all inputs are fingerprinted into the outputs, and
//! downstream commands refuse mismatched lineage.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use mone_core::calibration::{run_calibration, CalibrationRun};
use mone_core::checkpoint::{self, AnyModel};
use mone_core::corpus::{generate_corpus, sequences_fingerprint, Corpus};
use mone_core::error::{MoneError, Result};
use mone_core::eval::{
    cost_report, heatmap_csv, layer_discrepancies_over_corpus, logit_discrepancy, perplexity,
    prune_set_overlap,
};
use mone_core::exec::ExecMode;
use mone_core::model::{init_model, MoEModel, TokenId};
use mone_core::pruning::{
    apply_plan, build_plan, identity_mone, BuildOptions, MoNEModel, PruningPlan, ReplacementMode,
};
use mone_core::redundancy::{layer_scores_csv, ScoreMethod};
use mone_core::report::{
    emit_report, report_to_bytes, validate_report, AblationSummary, CellKey, CellMetrics,
    CellResult, DiffCell, EvalReport, OverlapCell, PerplexityPair, REPORT_SCHEMA_VERSION,
};

use crate::config::RunConfig;

/// Write only when content differs; keeps reruns from touching files.
fn write_if_changed(path: &Path, bytes: &[u8]) -> Result<bool> {
    if let Ok(existing) = fs::read(path) {
        if existing == bytes {
            return Ok(false);
        }
    }
    fs::write(path, bytes)?;
    Ok(true)
}

fn load_dense(path: &Path) -> Result<MoEModel> {
    checkpoint::load(path)?.into_dense()
}

/// Build a seeded model checkpoint and print its parameter counts.
pub fn cmd_gen_model(cfg: &RunConfig, out: &Path) -> Result<()> {
    let model = init_model(&cfg.model)?;
    checkpoint::save_model(&model, out)?;
    let counts = model.param_counts();
    let fp = checkpoint::model_fingerprint(&model)?;
    println!("wrote {}", out.display());
    println!(
        "params: total {} (expert {}, other {})",
        counts.total, counts.expert, counts.other
    );
    println!("fingerprint: {fp}");
    Ok(())
}

/// Generate a seeded synthetic corpus.
pub fn cmd_gen_data(cfg: &RunConfig, seed: u64, out: &Path) -> Result<()> {
    let corpus = generate_corpus(&cfg.corpus.generator_config(seed), cfg.model.vocab_size)?;
    corpus.save(out)?;
    println!(
        "wrote {} ({} sequences x {} tokens, seed {seed})",
        out.display(),
        corpus.sequences.len(),
        cfg.corpus.seq_len
    );
    println!("fingerprint: {}", corpus.fingerprint());
    Ok(())
}

/// Accumulate expert statistics over the first `samples` sequences.
pub fn cmd_calibrate(model_path: &Path, data_path: &Path, samples: usize, out: &Path) -> Result<()> {
    let model = load_dense(model_path)?;
    let corpus = Corpus::load(data_path)?;
    if samples == 0 || samples > corpus.sequences.len() {
        return Err(MoneError::Input(format!(
            "requested {samples} calibration sequences, corpus has {}",
            corpus.sequences.len()
        )));
    }
    let run = run_calibration(&model, &corpus.sequences[..samples], ExecMode::default())?;
    run.save(out)?;
    let csv_path = out.with_extension("csv");
    write_if_changed(&csv_path, run.to_csv().as_bytes())?;
    println!("wrote {} and {}", out.display(), csv_path.display());
    println!("tokens: {}", run.total_tokens);
    println!("model fingerprint:  {}", run.model_fingerprint);
    println!("corpus fingerprint: {}", run.corpus_fingerprint);
    println!("calibration fingerprint: {}", run.fingerprint()?);
    Ok(())
}

pub struct PruneArgs {
    pub method: ScoreMethod,
    pub ratio: f64,
    pub mode: ReplacementMode,
    pub build: BuildOptions,
}

/// Build and apply a pruning plan; emit the pruned checkpoint, the plan
/// JSON and the per-expert score table.
pub fn cmd_prune(
    model_path: &Path,
    calib_path: &Path,
    args: &PruneArgs,
    out_model: &Path,
    out_plan: &Path,
) -> Result<()> {
    let model = load_dense(model_path)?;
    let calib = CalibrationRun::load(calib_path)?;
    let model_fp = checkpoint::model_fingerprint(&model)?;
    if calib.model_fingerprint != model_fp {
        return Err(MoneError::Compatibility(format!(
            "calibration was computed on model {} but got {}",
            &calib.model_fingerprint[..12],
            &model_fp[..12]
        )));
    }
    let plan = build_plan(&calib, args.method, args.ratio, args.mode, &args.build)?;
    let pruned = apply_plan(&model, &plan)?;
    let lineage = checkpoint::PrunedLineage {
        source_model: model_fp,
        calibration: calib.fingerprint()?,
        plan: plan.fingerprint()?,
    };
    checkpoint::save_pruned(&pruned, Some(&lineage), out_model)?;
    plan.save(out_plan)?;
    let scores_csv = out_plan.with_extension("csv");
    let scores: Vec<_> = plan.layers.iter().map(|l| l.scores.clone()).collect();
    write_if_changed(&scores_csv, layer_scores_csv(&scores).as_bytes())?;

    let before = model.param_counts();
    let after = pruned.param_counts();
    println!("wrote {} and {}", out_model.display(), out_plan.display());
    for layer in &plan.layers {
        println!(
            "layer {}: pruned {} of {} experts {:?}",
            layer.scores.layer_index,
            layer.prune_set.len(),
            model.config.n_experts,
            layer.prune_set
        );
    }
    println!(
        "params: {} -> {} ({} expert params removed, {} novice values added)",
        before.total,
        after.total,
        before.expert - after.expert,
        after.novice
    );
    Ok(())
}

/// Compare an original and a pruned checkpoint over a corpus.
pub fn cmd_eval(
    original_path: &Path,
    pruned_path: &Path,
    data_path: &Path,
    samples: Option<usize>,
    out: &Path,
) -> Result<()> {
    let original = load_dense(original_path)?;
    let original_fp = checkpoint::model_fingerprint(&original)?;
    let loaded = checkpoint::load(pruned_path)?;
    let pruned_fp = loaded.fingerprint()?;
    let pruned = match loaded {
        AnyModel::Pruned { model, lineage } => {
            if let Some(lineage) = lineage {
                if lineage.source_model != original_fp {
                    return Err(MoneError::Compatibility(format!(
                        "pruned checkpoint derives from model {} but --original is {}",
                        &lineage.source_model[..12],
                        &original_fp[..12]
                    )));
                }
            }
            model
        }
        AnyModel::Dense(m) => identity_mone(&m),
    };
    let corpus = Corpus::load(data_path)?;
    let n = samples.unwrap_or(corpus.sequences.len());
    if n == 0 || n > corpus.sequences.len() {
        return Err(MoneError::Input(format!(
            "requested {n} evaluation sequences, corpus has {}",
            corpus.sequences.len()
        )));
    }
    let eval_seqs = &corpus.sequences[..n];
    let fingerprints = BTreeMap::from([
        ("original".to_string(), original_fp),
        ("pruned".to_string(), pruned_fp),
        ("corpus".to_string(), sequences_fingerprint(eval_seqs)),
    ]);
    let report = evaluate_pair(&original, &pruned, eval_seqs, fingerprints, None)?;
    emit_report(&report, out)?;
    let doc: serde_json::Value = serde_json::from_slice(&report_to_bytes(&report)?)?;
    validate_report(&doc)?;
    println!("wrote {}", out.display());
    println!(
        "perplexity: original {:.6}, pruned {:.6}",
        report.perplexity.original, report.perplexity.pruned
    );
    println!("logit discrepancy: {:.6e}", report.logit_discrepancy);
    Ok(())
}

fn evaluate_pair(
    original: &MoEModel,
    pruned: &MoNEModel,
    eval_seqs: &[Vec<TokenId>],
    fingerprints: BTreeMap<String, String>,
    ppl_original_cached: Option<f64>,
) -> Result<EvalReport> {
    let mode = ExecMode::default();
    let layers = layer_discrepancies_over_corpus(original, pruned, eval_seqs, mode)?;
    let logit = logit_discrepancy(original, pruned, eval_seqs, mode)?;
    let ppl_original = match ppl_original_cached {
        Some(p) => p,
        None => perplexity(original, eval_seqs, mode)?,
    };
    let ppl_pruned = perplexity(pruned, eval_seqs, mode)?;
    let cost = cost_report(original, pruned, eval_seqs, mode)?;
    Ok(EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        kind: "eval".into(),
        config: original.config.clone(),
        fingerprints,
        layers,
        logit_discrepancy: logit,
        perplexity: PerplexityPair { original: ppl_original, pruned: ppl_pruned },
        cost,
    })
}

pub struct AblateOutcome {
    pub total: usize,
    pub run: usize,
    pub skipped: usize,
    pub failed: usize,
}

/// Run the full method x ratio x mode x sample-size x source grid, emit one
/// report per cell plus a difference-to-baseline summary and prune-set
/// overlap matrices. Cells whose outputs already exist with matching
/// fingerprints are skipped.
pub fn cmd_ablate(cfg: &RunConfig, out_dir: &Path) -> Result<AblateOutcome> {
    cfg.validate()?;
    let mode = ExecMode::default();
    let cells_dir = out_dir.join("cells");
    fs::create_dir_all(&cells_dir)?;

    let model = init_model(&cfg.model)?;
    let model_fp = checkpoint::model_fingerprint(&model)?;
    write_if_changed(&out_dir.join("model.ckpt"), &checkpoint::model_to_bytes(&model)?)?;

    let mut fingerprints = BTreeMap::from([("model".to_string(), model_fp.clone())]);
    let mut corpora: BTreeMap<u64, Corpus> = BTreeMap::new();
    for &src in &cfg.corpus.source_seeds {
        let corpus = generate_corpus(&cfg.corpus.generator_config(src), cfg.model.vocab_size)?;
        write_if_changed(&out_dir.join(format!("corpus_s{src}.monc")), &corpus.to_bytes())?;
        fingerprints.insert(format!("corpus_s{src}"), corpus.fingerprint());
        corpora.insert(src, corpus);
    }

    // Calibrations and original-model perplexities are shared across cells.
    println!(
        "calibrating {} sample sizes x {} sources",
        cfg.calibration.sample_sizes.len(),
        cfg.corpus.source_seeds.len()
    );
    let mut calibs: BTreeMap<(usize, u64), CalibrationRun> = BTreeMap::new();
    for &n in &cfg.calibration.sample_sizes {
        for (&src, corpus) in &corpora {
            let calib = run_calibration(&model, &corpus.sequences[..n], mode)?;
            write_if_changed(&out_dir.join(format!("calib_n{n}_s{src}.bin")), &calib.to_bytes()?)?;
            write_if_changed(
                &out_dir.join(format!("heatmap_n{n}_s{src}.csv")),
                heatmap_csv(&calib).as_bytes(),
            )?;
            calibs.insert((n, src), calib);
        }
    }
    let mut ppl_original: BTreeMap<u64, f64> = BTreeMap::new();
    for (&src, corpus) in &corpora {
        let eval_seqs = &corpus.sequences[..cfg.eval.n_sequences];
        ppl_original.insert(src, perplexity(&model, eval_seqs, mode)?);
    }

    let build = BuildOptions {
        freq_norm: cfg.pruning.freq_norm,
        renormalize_kept_gates: cfg.pruning.renormalize_kept_gates,
    };

    let mut cells: Vec<CellResult> = Vec::new();
    // Plans for the overlap matrices, keyed by (method, ratio) position and
    // calibration variant. Prune sets do not depend on the replacement mode.
    let mut plans: BTreeMap<(usize, usize, usize, u64), PruningPlan> = BTreeMap::new();
    let mut outcome = AblateOutcome { total: 0, run: 0, skipped: 0, failed: 0 };

    for &n in &cfg.calibration.sample_sizes {
        for &src in &cfg.corpus.source_seeds {
            for (mi, &method) in cfg.pruning.methods.iter().enumerate() {
                for (ri, &ratio) in cfg.pruning.ratios.iter().enumerate() {
                    for (pi, &prune_mode) in cfg.pruning.modes.iter().enumerate() {
                        let key = CellKey {
                            method,
                            ratio,
                            mode: prune_mode,
                            sample_size: n,
                            source_seed: src,
                        };
                        outcome.total += 1;
                        let result = run_cell(
                            &model,
                            &model_fp,
                            &corpora[&src],
                            &calibs[&(n, src)],
                            &key,
                            &build,
                            cfg.eval.n_sequences,
                            ppl_original[&src],
                            &cells_dir,
                        );
                        match result {
                            Ok((cell, plan, skipped)) => {
                                if pi == 0 {
                                    plans.insert((mi, ri, n, src), plan);
                                }
                                if skipped {
                                    outcome.skipped += 1;
                                } else {
                                    outcome.run += 1;
                                }
                                println!(
                                    "cell {}: {}",
                                    cell.key.slug(),
                                    if skipped { "skipped (up to date)" } else { "ok" }
                                );
                                cells.push(cell);
                            }
                            Err(e) => {
                                outcome.failed += 1;
                                eprintln!("cell {}: FAILED: {e}", key.slug());
                                cells.push(CellResult {
                                    key,
                                    status: format!("error: {e}"),
                                    metrics: None,
                                    fingerprints: BTreeMap::new(),
                                });
                            }
                        }
                    }
                }
            }
        }
    }

    // Difference-to-baseline table: each cell minus the fused-score novice
    // cell of the same ratio and calibration variant.
    let mut diff_to_mone = Vec::new();
    for cell in &cells {
        let Some(metrics) = &cell.metrics else { continue };
        let baseline = cells.iter().find(|c| {
            c.key.method == ScoreMethod::Mone
                && c.key.mode == ReplacementMode::Novice
                && c.key.ratio == cell.key.ratio
                && c.key.sample_size == cell.key.sample_size
                && c.key.source_seed == cell.key.source_seed
        });
        let Some(base_metrics) = baseline.and_then(|b| b.metrics.as_ref()) else { continue };
        diff_to_mone.push(DiffCell {
            key: cell.key.clone(),
            perplexity_delta: metrics.perplexity.pruned - base_metrics.perplexity.pruned,
            logit_discrepancy_delta: metrics.logit_discrepancy - base_metrics.logit_discrepancy,
        });
    }

    // Prune-set agreement across calibration variants.
    let mut overlap = Vec::new();
    let variants: Vec<(usize, u64)> = cfg
        .calibration
        .sample_sizes
        .iter()
        .flat_map(|&n| cfg.corpus.source_seeds.iter().map(move |&s| (n, s)))
        .collect();
    for (mi, &method) in cfg.pruning.methods.iter().enumerate() {
        for (ri, &ratio) in cfg.pruning.ratios.iter().enumerate() {
            for i in 0..variants.len() {
                for j in i + 1..variants.len() {
                    let (na, sa) = variants[i];
                    let (nb, sb) = variants[j];
                    let (Some(pa), Some(pb)) =
                        (plans.get(&(mi, ri, na, sa)), plans.get(&(mi, ri, nb, sb)))
                    else {
                        continue;
                    };
                    if let Ok(o) = prune_set_overlap(pa, pb) {
                        overlap.push(OverlapCell {
                            method,
                            ratio,
                            mode: cfg.pruning.modes[0],
                            sample_a: na,
                            source_a: sa,
                            sample_b: nb,
                            source_b: sb,
                            overlap: o,
                        });
                    }
                }
            }
        }
    }

    let summary = AblationSummary {
        schema_version: REPORT_SCHEMA_VERSION,
        kind: "ablation_summary".into(),
        config: cfg.snapshot(),
        fingerprints,
        cells,
        diff_to_mone,
        overlap,
    };
    emit_report(&summary, &out_dir.join("summary.json"))?;
    let doc: serde_json::Value = serde_json::from_slice(&report_to_bytes(&summary)?)?;
    validate_report(&doc)?;
    write_if_changed(&out_dir.join("summary.csv"), summary_csv(&summary).as_bytes())?;
    write_if_changed(
        &out_dir.join("discrepancy_vs_ratio.csv"),
        discrepancy_csv(&summary).as_bytes(),
    )?;

    println!(
        "grid complete: {} cells ({} run, {} skipped, {} failed); summary at {}",
        outcome.total,
        outcome.run,
        outcome.skipped,
        outcome.failed,
        out_dir.join("summary.json").display()
    );
    if outcome.failed == outcome.total {
        return Err(MoneError::Input(format!("all {} grid cells failed", outcome.total)));
    }
    Ok(outcome)
}

#[allow(clippy::too_many_arguments)]
fn run_cell(
    model: &MoEModel,
    model_fp: &str,
    corpus: &Corpus,
    calib: &CalibrationRun,
    key: &CellKey,
    build: &BuildOptions,
    eval_n: usize,
    ppl_original: f64,
    cells_dir: &Path,
) -> Result<(CellResult, PruningPlan, bool)> {
    let plan = build_plan(calib, key.method, key.ratio, key.mode, build)?;
    let pruned = apply_plan(model, &plan)?;
    let eval_seqs = &corpus.sequences[..eval_n];
    let expected: BTreeMap<String, String> = BTreeMap::from([
        ("original".to_string(), model_fp.to_string()),
        ("pruned".to_string(), checkpoint::pruned_fingerprint(&pruned)?),
        ("corpus".to_string(), sequences_fingerprint(eval_seqs)),
        ("calibration".to_string(), calib.fingerprint()?),
        ("plan".to_string(), plan.fingerprint()?),
    ]);

    let cell_dir = cells_dir.join(key.slug());
    fs::create_dir_all(&cell_dir)?;
    write_if_changed(&cell_dir.join("plan.json"), &plan.to_json()?)?;
    let lineage = checkpoint::PrunedLineage {
        source_model: model_fp.to_string(),
        calibration: expected["calibration"].clone(),
        plan: expected["plan"].clone(),
    };
    write_if_changed(
        &cell_dir.join("pruned.ckpt"),
        &checkpoint::pruned_to_bytes_with_lineage(&pruned, Some(&lineage))?,
    )?;

    let report_path = cell_dir.join("report.json");
    if let Ok(bytes) = fs::read(&report_path) {
        if let Ok(existing) = serde_json::from_slice::<EvalReport>(&bytes) {
            if existing.fingerprints == expected {
                let cell = cell_from_report(key, &existing);
                return Ok((cell, plan, true));
            }
        }
    }

    let report = evaluate_pair(model, &pruned, eval_seqs, expected, Some(ppl_original))?;
    emit_report(&report, &report_path)?;
    let cell = cell_from_report(key, &report);
    Ok((cell, plan, false))
}

fn cell_from_report(key: &CellKey, report: &EvalReport) -> CellResult {
    let mean_layer = if report.layers.is_empty() {
        0.0
    } else {
        report.layers.iter().map(|l| l.mean_l2).sum::<f64>() / report.layers.len() as f64
    };
    CellResult {
        key: key.clone(),
        status: "ok".into(),
        metrics: Some(CellMetrics {
            perplexity: report.perplexity.clone(),
            logit_discrepancy: report.logit_discrepancy,
            mean_layer_discrepancy: mean_layer,
            cost: report.cost.clone(),
        }),
        fingerprints: report.fingerprints.clone(),
    }
}

fn summary_csv(summary: &AblationSummary) -> String {
    let mut out = String::from(
        "method,ratio,mode,sample_size,source_seed,status,perplexity_original,perplexity_pruned,logit_discrepancy,mean_layer_discrepancy,perplexity_delta_to_mone\n",
    );
    for cell in &summary.cells {
        let delta = summary
            .diff_to_mone
            .iter()
            .find(|d| d.key == cell.key)
            .map(|d| d.perplexity_delta.to_string())
            .unwrap_or_default();
        let (po, pp, ld, md) = match &cell.metrics {
            Some(m) => (
                m.perplexity.original.to_string(),
                m.perplexity.pruned.to_string(),
                m.logit_discrepancy.to_string(),
                m.mean_layer_discrepancy.to_string(),
            ),
            None => Default::default(),
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            cell.key.method.label(),
            cell.key.ratio,
            match cell.key.mode {
                ReplacementMode::Novice => "novice",
                ReplacementMode::Drop => "drop",
            },
            cell.key.sample_size,
            cell.key.source_seed,
            if cell.status == "ok" { "ok" } else { "error" },
            po,
            pp,
            ld,
            md,
            delta
        ));
    }
    out
}

fn discrepancy_csv(summary: &AblationSummary) -> String {
    let mut out =
        String::from("method,mode,sample_size,source_seed,ratio,mean_layer_discrepancy,logit_discrepancy\n");
    for cell in &summary.cells {
        let Some(m) = &cell.metrics else { continue };
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            cell.key.method.label(),
            match cell.key.mode {
                ReplacementMode::Novice => "novice",
                ReplacementMode::Drop => "drop",
            },
            cell.key.sample_size,
            cell.key.source_seed,
            cell.key.ratio,
            m.mean_layer_discrepancy,
            m.logit_discrepancy
        ));
    }
    out
}

/// Resolve a possibly relative path against the output directory.
pub fn resolve(out_dir: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        out_dir.join(path)
    }
}
