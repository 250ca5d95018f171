//! Pruning-quality metrics.
//!
//! Layer discrepancy compares original and pruned MoE layers on hidden
//! states traced from the original model, so every layer sees identical
//! inputs and drift does not compound. Logit discrepancy and perplexity are
//! end-to-end. All corpus loops reduce per-sequence partials in corpus
//! order, so parallel and sequential runs agree bit for bit.

use serde::{Deserialize, Serialize};

use crate::error::{MoneError, Result};
use crate::exec::{map_ordered, ExecMode};
use crate::linalg::l2_dist;
use crate::model::{FfnLayer, MoELayer, MoEModel, ModelConfig, SelectedExpert, TokenId, TransformerModel};
use crate::pruning::{MoNELayer, MoNEModel, PruningPlan};

/// L2 statistics of per-token output differences for one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDiscrepancy {
    pub layer_index: usize,
    pub mean_l2: f64,
    pub max_l2: f64,
    /// Sum of squared L2 differences over all tokens.
    pub sum_sq: f64,
    pub token_count: u64,
}

/// Reconstruct the original layer output from its trace records; the same
/// gate-weighted sum the forward pass performed, in the same order.
pub fn moe_output_from_trace(records: &[SelectedExpert], d: usize) -> Vec<f64> {
    let mut y = vec![0.0f64; d];
    for rec in records {
        for (acc, &o) in y.iter_mut().zip(&rec.output) {
            *acc += rec.gate * o;
        }
    }
    y
}

/// Pruned-layer output computed from the original layer's trace. Valid
/// because the router is untouched: identical input means identical
/// selection, and retained experts' outputs are already in the trace.
pub fn mone_output_from_trace(records: &[SelectedExpert], layer: &MoNELayer, d: usize) -> Vec<f64> {
    let kept_scale = if layer.renormalize_kept_gates {
        let kept: f64 = records
            .iter()
            .filter(|r| layer.retained.contains_key(&r.index))
            .map(|r| r.gate)
            .sum();
        if kept > 0.0 {
            Some(1.0 / kept)
        } else {
            None
        }
    } else {
        None
    };
    let mut y = vec![0.0f64; d];
    for rec in records {
        if layer.retained.contains_key(&rec.index) {
            let gate = kept_scale.map_or(rec.gate, |s| rec.gate * s);
            for (acc, &o) in y.iter_mut().zip(&rec.output) {
                *acc += gate * o;
            }
        } else if !layer.renormalize_kept_gates {
            if let Some(novice) = layer.novices.get(&rec.index) {
                for (acc, &n) in y.iter_mut().zip(novice) {
                    *acc += rec.gate * n;
                }
            }
        }
    }
    y
}

/// Compare one original layer against its pruned counterpart on a set of
/// hidden-state samples, recomputing both forwards.
pub fn layer_discrepancy(
    original: &MoELayer,
    pruned: &MoNELayer,
    samples: &[Vec<f64>],
    config: &ModelConfig,
) -> Result<LayerDiscrepancy> {
    let mut sum = 0.0f64;
    let mut sum_sq = 0.0f64;
    let mut max = 0.0f64;
    for x in samples {
        let a = original.forward(x, config.top_k, config.renormalize_gates)?;
        let b = pruned.forward(x, config.top_k, config.renormalize_gates)?;
        let dist = l2_dist(&a, &b);
        sum += dist;
        sum_sq += dist * dist;
        max = max.max(dist);
    }
    let count = samples.len() as u64;
    Ok(LayerDiscrepancy {
        layer_index: 0,
        mean_l2: if count > 0 { sum / count as f64 } else { 0.0 },
        max_l2: max,
        sum_sq,
        token_count: count,
    })
}

/// Per-layer discrepancy over a corpus: hidden states are traced from the
/// original model once; pruned outputs are derived from the same traces.
pub fn layer_discrepancies_over_corpus(
    original: &MoEModel,
    pruned: &MoNEModel,
    corpus: &[Vec<TokenId>],
    mode: ExecMode,
) -> Result<Vec<LayerDiscrepancy>> {
    if corpus.is_empty() {
        return Err(MoneError::Input("empty evaluation corpus".into()));
    }
    check_compatible(&original.config, &pruned.config)?;
    let n_layers = original.config.n_layers;
    let d = original.config.d_model;

    // (sum, sum_sq, max, count) per layer, per sequence.
    type Partial = Vec<(f64, f64, f64, u64)>;
    let partials: Vec<Result<Partial>> = map_ordered(corpus, mode, |seq| {
        let (_, trace) = original.forward_traced(seq)?;
        let mut layer_stats: Partial = vec![(0.0, 0.0, 0.0, 0); n_layers];
        for (l, layer_trace) in trace.layers.iter().enumerate() {
            let mone_layer = &pruned.blocks[l].moe;
            for token in layer_trace {
                let a = moe_output_from_trace(&token.ffn, d);
                let b = mone_output_from_trace(&token.ffn, mone_layer, d);
                let dist = l2_dist(&a, &b);
                let s = &mut layer_stats[l];
                s.0 += dist;
                s.1 += dist * dist;
                s.2 = s.2.max(dist);
                s.3 += 1;
            }
        }
        Ok(layer_stats)
    });

    let mut totals: Vec<(f64, f64, f64, u64)> = vec![(0.0, 0.0, 0.0, 0); n_layers];
    for partial in partials {
        for (t, p) in totals.iter_mut().zip(partial?) {
            t.0 += p.0;
            t.1 += p.1;
            t.2 = t.2.max(p.2);
            t.3 += p.3;
        }
    }
    Ok(totals
        .into_iter()
        .enumerate()
        .map(|(l, (sum, sum_sq, max, count))| LayerDiscrepancy {
            layer_index: l,
            mean_l2: if count > 0 { sum / count as f64 } else { 0.0 },
            max_l2: max,
            sum_sq,
            token_count: count,
        })
        .collect())
}

/// Mean per-token L2 distance between the two models' logits.
pub fn logit_discrepancy<A, B>(
    a: &TransformerModel<A>,
    b: &TransformerModel<B>,
    corpus: &[Vec<TokenId>],
    mode: ExecMode,
) -> Result<f64>
where
    A: FfnLayer + Sync,
    B: FfnLayer + Sync,
{
    if corpus.is_empty() {
        return Err(MoneError::Input("empty evaluation corpus".into()));
    }
    check_compatible(&a.config, &b.config)?;
    let partials: Vec<Result<(f64, u64)>> = map_ordered(corpus, mode, |seq| {
        let la = a.forward(seq)?;
        let lb = b.forward(seq)?;
        let sum: f64 = la.iter().zip(&lb).map(|(ra, rb)| l2_dist(ra, rb)).sum();
        Ok((sum, seq.len() as u64))
    });
    let mut sum = 0.0;
    let mut count = 0u64;
    for p in partials {
        let (s, c) = p?;
        sum += s;
        count += c;
    }
    Ok(sum / count as f64)
}

/// Teacher-forced perplexity: exp of the mean next-token negative
/// log-likelihood (natural log) over all positions.
pub fn perplexity<F>(model: &TransformerModel<F>, corpus: &[Vec<TokenId>], mode: ExecMode) -> Result<f64>
where
    F: FfnLayer + Sync,
{
    if corpus.is_empty() {
        return Err(MoneError::Input("empty evaluation corpus".into()));
    }
    for seq in corpus {
        if seq.len() < 2 {
            return Err(MoneError::Input(format!(
                "perplexity needs sequences of length >= 2, got {}",
                seq.len()
            )));
        }
    }
    let partials: Vec<Result<(f64, u64)>> = map_ordered(corpus, mode, |seq| {
        let logits = model.forward(seq)?;
        let mut nll = 0.0f64;
        for t in 0..seq.len() - 1 {
            let row = &logits[t];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
            nll += lse - row[seq[t + 1] as usize];
        }
        Ok((nll, (seq.len() - 1) as u64))
    });
    let mut nll = 0.0;
    let mut positions = 0u64;
    for p in partials {
        let (s, c) = p?;
        nll += s;
        positions += c;
    }
    Ok((nll / positions as f64).exp())
}

/// Per-layer prune-set agreement between two plans.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub per_layer: Vec<f64>,
    pub mean: f64,
}

/// |A intersect B| / |A| per layer. Plans must agree on layer count and
/// per-layer prune-set size.
pub fn prune_set_overlap(a: &PruningPlan, b: &PruningPlan) -> Result<OverlapReport> {
    if a.layers.len() != b.layers.len() {
        return Err(MoneError::Comparison(format!(
            "plans cover {} vs {} layers",
            a.layers.len(),
            b.layers.len()
        )));
    }
    let mut per_layer = Vec::with_capacity(a.layers.len());
    for (la, lb) in a.layers.iter().zip(&b.layers) {
        if la.prune_set.len() != lb.prune_set.len() {
            return Err(MoneError::Comparison(format!(
                "prune sets have different sizes: {} vs {}",
                la.prune_set.len(),
                lb.prune_set.len()
            )));
        }
        if la.prune_set.is_empty() {
            per_layer.push(1.0);
            continue;
        }
        let shared = la.prune_set.iter().filter(|e| lb.prune_set.contains(e)).count();
        per_layer.push(shared as f64 / la.prune_set.len() as f64);
    }
    let mean = per_layer.iter().sum::<f64>() / per_layer.len() as f64;
    Ok(OverlapReport { per_layer, mean })
}

/// Exact parameter, FLOP and memory accounting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub total_params_before: u64,
    pub total_params_after: u64,
    pub expert_params_before: u64,
    pub expert_params_after: u64,
    pub novice_params_after: u64,
    /// 4 bytes per f32 parameter.
    pub memory_bytes_before: u64,
    pub memory_bytes_after: u64,
    pub tokens: u64,
    pub novice_hits: u64,
    /// Expert-matmul FLOPs summed over the trace.
    pub expert_flops_before: u64,
    pub expert_flops_after: u64,
    /// Novice table reads (d entries per hit), not matmul FLOPs.
    pub novice_lookup_entries: u64,
    pub mean_activated_params_before: f64,
    pub mean_activated_params_after: f64,
    pub mean_flops_per_token_before: f64,
    pub mean_flops_per_token_after: f64,
}

/// FLOPs of one expert evaluation: two matmuls at 2 * rows * cols each.
pub fn expert_flops(config: &ModelConfig) -> u64 {
    4 * config.d_model as u64 * config.d_expert as u64
}

/// Attention + head FLOPs for the token at `position`; identical before and
/// after pruning. Matmuls only: qkvo projections, score and context dots,
/// router and lm head.
fn shared_flops_per_token(config: &ModelConfig, position: usize) -> u64 {
    let d = config.d_model as u64;
    let ctx = (position + 1) as u64;
    let per_layer = 8 * d * d + 4 * d * ctx + 2 * d * config.n_experts as u64;
    config.n_layers as u64 * per_layer + 2 * d * config.vocab_size as u64
}

/// Non-expert parameters touched per token: embedding row, attention, norms,
/// router, final norm and head. Constant across tokens.
fn shared_activated_params(config: &ModelConfig) -> u64 {
    let d = config.d_model as u64;
    let per_layer = 4 * d * d + 2 * d + d * config.n_experts as u64;
    d + config.n_layers as u64 * per_layer + d + d * config.vocab_size as u64
}

/// Run the pruned model over the corpus, count novice hits, and produce the
/// exact cost accounting for both models.
pub fn cost_report(
    original: &MoEModel,
    pruned: &MoNEModel,
    corpus: &[Vec<TokenId>],
    mode: ExecMode,
) -> Result<CostReport> {
    if corpus.is_empty() {
        return Err(MoneError::Input("empty evaluation corpus".into()));
    }
    check_compatible(&original.config, &pruned.config)?;
    let cfg = &original.config;
    let k = cfg.top_k as u64;
    let ef = expert_flops(cfg);
    let d = cfg.d_model as u64;

    // Per sequence: (tokens, novice hits, shared flops, expert-activated
    // params before, expert-activated params after).
    type CostPartial = (u64, u64, u64, u64, u64);
    let partials: Vec<Result<CostPartial>> = map_ordered(corpus, mode, |seq| {
        let (_, trace) = pruned.forward_traced(seq)?;
        let mut hits = 0u64;
        let mut activated_after = 0u64;
        for layer in &trace.layers {
            for token in layer {
                let j = token.ffn.iter().filter(|h| h.novice).count() as u64;
                hits += j;
                activated_after += (k - j) * 2 * d * cfg.d_expert as u64 + j * d;
            }
        }
        let tokens = seq.len() as u64;
        let shared_flops: u64 = (0..seq.len()).map(|t| shared_flops_per_token(cfg, t)).sum();
        let activated_before = tokens * cfg.n_layers as u64 * k * 2 * d * cfg.d_expert as u64;
        Ok((tokens, hits, shared_flops, activated_before, activated_after))
    });

    let mut tokens = 0u64;
    let mut novice_hits = 0u64;
    let mut shared_flops = 0u64;
    let mut expert_activated_before = 0u64;
    let mut expert_activated_after = 0u64;
    for p in partials {
        let (t, h, f, ab, aa) = p?;
        tokens += t;
        novice_hits += h;
        shared_flops += f;
        expert_activated_before += ab;
        expert_activated_after += aa;
    }

    let layer_selections = tokens * cfg.n_layers as u64 * k;
    let expert_flops_before = layer_selections * ef;
    let expert_flops_after = (layer_selections - novice_hits) * ef;
    let novice_lookup_entries = novice_hits * d;

    let before = original.param_counts();
    let after = pruned.param_counts();
    let shared_params = shared_activated_params(cfg);

    Ok(CostReport {
        total_params_before: before.total,
        total_params_after: after.total,
        expert_params_before: before.expert,
        expert_params_after: after.expert,
        novice_params_after: after.novice,
        memory_bytes_before: before.total * 4,
        memory_bytes_after: after.total * 4,
        tokens,
        novice_hits,
        expert_flops_before,
        expert_flops_after,
        novice_lookup_entries,
        mean_activated_params_before: (tokens * shared_params + expert_activated_before) as f64
            / tokens as f64,
        mean_activated_params_after: (tokens * shared_params + expert_activated_after) as f64
            / tokens as f64,
        mean_flops_per_token_before: (shared_flops + expert_flops_before) as f64 / tokens as f64,
        mean_flops_per_token_after: (shared_flops + expert_flops_after + novice_lookup_entries)
            as f64
            / tokens as f64,
    })
}

/// Heatmap export: per-layer activation share and output-std norm.
pub fn heatmap_csv(calib: &crate::calibration::CalibrationRun) -> String {
    let mut out = String::from("layer,expert,n_frac,sigma_l2\n");
    let slots = calib.total_tokens * calib.config.top_k as u64;
    for (l, layer) in calib.layers.iter().enumerate() {
        for (e, s) in layer.iter().enumerate() {
            let frac = if slots > 0 { s.n as f64 / slots as f64 } else { 0.0 };
            let sigma = s.var_unbiased.iter().sum::<f64>().max(0.0).sqrt();
            out.push_str(&format!("{l},{e},{frac},{sigma}\n"));
        }
    }
    out
}

fn check_compatible(a: &ModelConfig, b: &ModelConfig) -> Result<()> {
    if a.vocab_size != b.vocab_size || a.d_model != b.d_model || a.n_layers != b.n_layers {
        return Err(MoneError::Compatibility(format!(
            "models disagree on shape: vocab {}/{}, d_model {}/{}, layers {}/{}",
            a.vocab_size, b.vocab_size, a.d_model, b.d_model, a.n_layers, b.n_layers
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibration::run_calibration;
    use crate::linalg::Matrix;
    use crate::model::init_model;
    use crate::pruning::{apply_plan, build_plan, BuildOptions, ReplacementMode};
    use crate::redundancy::ScoreMethod;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn test_config() -> ModelConfig {
        ModelConfig {
            vocab_size: 17,
            d_model: 8,
            n_layers: 2,
            n_experts: 4,
            top_k: 2,
            d_expert: 12,
            seed: 7,
            renormalize_gates: false,
        }
    }

    fn test_corpus(cfg: &ModelConfig, n: usize, len: usize, seed: u64) -> Vec<Vec<TokenId>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| (0..len).map(|_| rng.random_range(0..cfg.vocab_size as u32)).collect())
            .collect()
    }

    fn fixture(ratio: f64, mode: ReplacementMode) -> (MoEModel, MoNEModel, Vec<Vec<TokenId>>) {
        let cfg = test_config();
        let model = init_model(&cfg).unwrap();
        let corpus = test_corpus(&cfg, 20, 12, 55);
        let calib = run_calibration(&model, &corpus, ExecMode::Sequential).unwrap();
        let plan =
            build_plan(&calib, ScoreMethod::Mone, ratio, mode, &BuildOptions::default()).unwrap();
        let pruned = apply_plan(&model, &plan).unwrap();
        (model, pruned, corpus)
    }

    #[test]
    fn trace_reconstruction_matches_layer_forward() {
        let (model, pruned, corpus) = fixture(0.5, ReplacementMode::Novice);
        let cfg = &model.config;
        for seq in corpus.iter().take(4) {
            let (_, trace) = model.forward_traced(seq).unwrap();
            for (l, layer_trace) in trace.layers.iter().enumerate() {
                for token in layer_trace {
                    let orig = model.blocks[l]
                        .moe
                        .forward(&token.ffn_input, cfg.top_k, cfg.renormalize_gates)
                        .unwrap();
                    let from_trace = moe_output_from_trace(&token.ffn, cfg.d_model);
                    assert_eq!(orig, from_trace);

                    let mone = pruned.blocks[l]
                        .moe
                        .forward(&token.ffn_input, cfg.top_k, cfg.renormalize_gates)
                        .unwrap();
                    let mone_fast =
                        mone_output_from_trace(&token.ffn, &pruned.blocks[l].moe, cfg.d_model);
                    for (a, b) in mone.iter().zip(&mone_fast) {
                        assert!((a - b).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn empty_plan_means_zero_everywhere() {
        let (model, pruned, corpus) = fixture(0.0, ReplacementMode::Novice);
        let layers =
            layer_discrepancies_over_corpus(&model, &pruned, &corpus, ExecMode::Sequential).unwrap();
        for l in &layers {
            assert!(l.mean_l2 < 1e-6);
            assert!(l.max_l2 < 1e-6);
        }
        let logit = logit_discrepancy(&model, &pruned, &corpus, ExecMode::Sequential).unwrap();
        assert!(logit < 1e-6);
        let ppl_a = perplexity(&model, &corpus, ExecMode::Sequential).unwrap();
        let ppl_b = perplexity(&pruned, &corpus, ExecMode::Sequential).unwrap();
        assert!((ppl_a - ppl_b).abs() <= 1e-6 * ppl_a);
    }

    #[test]
    fn reflexive_logit_discrepancy_is_exactly_zero() {
        let cfg = test_config();
        let model = init_model(&cfg).unwrap();
        let corpus = test_corpus(&cfg, 4, 10, 3);
        let d = logit_discrepancy(&model, &model, &corpus, ExecMode::Sequential).unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn single_pruned_token_discrepancy_is_gate_times_distance() {
        // Forced router: tied logits select {0}; prune expert 0 so every
        // token is routed to exactly the pruned expert with gate 1.
        let mut cfg = test_config();
        cfg.top_k = 1;
        let mut model = init_model(&cfg).unwrap();
        for block in model.blocks.iter_mut() {
            block.moe.router.w_gate = Matrix::zeros(cfg.d_model, cfg.n_experts);
        }
        let corpus = test_corpus(&cfg, 4, 6, 9);
        let calib = run_calibration(&model, &corpus, ExecMode::Sequential).unwrap();
        let mut plan = build_plan(
            &calib,
            ScoreMethod::Mone,
            0.25,
            ReplacementMode::Novice,
            &BuildOptions::default(),
        )
        .unwrap();
        // Only expert 0 is ever activated; the degenerate rest would prune
        // first, so force the set to {0} to hit the pruned-expert path.
        for layer in plan.layers.iter_mut() {
            layer.prune_set = vec![0];
            layer.novices = vec![calib.layers[layer.scores.layer_index][0].mean_output.clone()];
        }
        let pruned = apply_plan(&model, &plan).unwrap();

        let seq = &corpus[0];
        let (_, trace) = model.forward_traced(seq).unwrap();
        for (l, layer_trace) in trace.layers.iter().enumerate() {
            let table = plan.novice_table(l);
            for token in layer_trace {
                let rec = &token.ffn[0];
                assert_eq!(rec.index, 0);
                let expected = rec.gate * l2_dist(&rec.output, &table[&0]);
                let a = moe_output_from_trace(&token.ffn, cfg.d_model);
                let b = mone_output_from_trace(&token.ffn, &pruned.blocks[l].moe, cfg.d_model);
                assert!((l2_dist(&a, &b) - expected).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn novice_layer_discrepancy_dominates_drop_on_calibration_corpus() {
        let (model, novice_model, corpus) = fixture(0.5, ReplacementMode::Novice);
        let (_, drop_model, _) = fixture(0.5, ReplacementMode::Drop);
        let novice =
            layer_discrepancies_over_corpus(&model, &novice_model, &corpus, ExecMode::Sequential)
                .unwrap();
        let drop =
            layer_discrepancies_over_corpus(&model, &drop_model, &corpus, ExecMode::Sequential)
                .unwrap();
        for (n, d) in novice.iter().zip(&drop) {
            assert!(
                n.sum_sq <= d.sum_sq + 1e-12,
                "layer {}: {} > {}",
                n.layer_index,
                n.sum_sq,
                d.sum_sq
            );
        }
    }

    #[test]
    fn perplexity_of_uniform_logits_is_vocab_size() {
        let cfg = test_config();
        let mut model = init_model(&cfg).unwrap();
        model.lm_head = Matrix::zeros(cfg.d_model, cfg.vocab_size);
        let corpus = test_corpus(&cfg, 3, 12, 21);
        let ppl = perplexity(&model, &corpus, ExecMode::Sequential).unwrap();
        assert!((ppl - cfg.vocab_size as f64).abs() <= 1e-3 * cfg.vocab_size as f64);
    }

    #[test]
    fn perplexity_is_deterministic_and_mode_independent() {
        let cfg = test_config();
        let model = init_model(&cfg).unwrap();
        let corpus = test_corpus(&cfg, 20, 12, 2);
        let a = perplexity(&model, &corpus, ExecMode::Sequential).unwrap();
        let b = perplexity(&model, &corpus, ExecMode::Sequential).unwrap();
        let c = perplexity(&model, &corpus, ExecMode::Parallel).unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn perplexity_rejects_short_sequences() {
        let cfg = test_config();
        let model = init_model(&cfg).unwrap();
        let err = perplexity(&model, &[vec![1]], ExecMode::Sequential).unwrap_err();
        assert!(matches!(err, MoneError::Input(_)));
    }

    #[test]
    fn overlap_identical_plans_is_one() {
        let cfg = test_config();
        let model = init_model(&cfg).unwrap();
        let corpus = test_corpus(&cfg, 10, 8, 55);
        let calib = run_calibration(&model, &corpus, ExecMode::Sequential).unwrap();
        let plan = build_plan(
            &calib,
            ScoreMethod::Mone,
            0.5,
            ReplacementMode::Novice,
            &BuildOptions::default(),
        )
        .unwrap();
        let same = prune_set_overlap(&plan, &plan).unwrap();
        assert!(same.per_layer.iter().all(|&f| f == 1.0));
        assert_eq!(same.mean, 1.0);
    }

    #[test]
    fn overlap_disjoint_sets_is_zero() {
        let cfg = test_config();
        let model = init_model(&cfg).unwrap();
        let corpus = test_corpus(&cfg, 10, 8, 55);
        let calib = run_calibration(&model, &corpus, ExecMode::Sequential).unwrap();
        let plan = build_plan(
            &calib,
            ScoreMethod::Mone,
            0.5,
            ReplacementMode::Novice,
            &BuildOptions::default(),
        )
        .unwrap();
        // Complement each layer's prune set: |P| = M/2, so the complement is
        // the same size and fully disjoint.
        let mut other = plan.clone();
        for layer in other.layers.iter_mut() {
            layer.prune_set =
                (0..cfg.n_experts).filter(|e| !layer.prune_set.contains(e)).collect();
        }
        let o = prune_set_overlap(&plan, &other).unwrap();
        assert!(o.per_layer.iter().all(|&f| f == 0.0));
        assert_eq!(o.mean, 0.0);
    }

    #[test]
    fn overlap_is_symmetric_for_equal_sizes() {
        let cfg = test_config();
        let model = init_model(&cfg).unwrap();
        let corpus = test_corpus(&cfg, 10, 8, 55);
        let calib = run_calibration(&model, &corpus, ExecMode::Sequential).unwrap();
        let a = build_plan(
            &calib,
            ScoreMethod::Mone,
            0.5,
            ReplacementMode::Novice,
            &BuildOptions::default(),
        )
        .unwrap();
        let b = build_plan(
            &calib,
            ScoreMethod::Random { seed: 3 },
            0.5,
            ReplacementMode::Novice,
            &BuildOptions::default(),
        )
        .unwrap();
        let ab = prune_set_overlap(&a, &b).unwrap();
        let ba = prune_set_overlap(&b, &a).unwrap();
        assert_eq!(ab.per_layer, ba.per_layer);
    }

    #[test]
    fn overlap_rejects_differing_sizes() {
        let cfg = test_config();
        let model = init_model(&cfg).unwrap();
        let corpus = test_corpus(&cfg, 10, 8, 55);
        let calib = run_calibration(&model, &corpus, ExecMode::Sequential).unwrap();
        let a = build_plan(
            &calib,
            ScoreMethod::Mone,
            0.5,
            ReplacementMode::Novice,
            &BuildOptions::default(),
        )
        .unwrap();
        let b = build_plan(
            &calib,
            ScoreMethod::Mone,
            0.25,
            ReplacementMode::Novice,
            &BuildOptions::default(),
        )
        .unwrap();
        assert!(matches!(prune_set_overlap(&a, &b), Err(MoneError::Comparison(_))));
    }

    #[test]
    fn cost_report_is_neutral_for_empty_plan() {
        let (model, pruned, corpus) = fixture(0.0, ReplacementMode::Novice);
        let report = cost_report(&model, &pruned, &corpus, ExecMode::Sequential).unwrap();
        assert_eq!(report.total_params_before, report.total_params_after);
        assert_eq!(report.expert_params_before, report.expert_params_after);
        assert_eq!(report.memory_bytes_before, report.memory_bytes_after);
        assert_eq!(report.expert_flops_before, report.expert_flops_after);
        assert_eq!(report.novice_hits, 0);
        assert_eq!(report.mean_flops_per_token_before, report.mean_flops_per_token_after);
        assert_eq!(report.mean_activated_params_before, report.mean_activated_params_after);
    }

    #[test]
    fn cost_report_halves_expert_memory_at_half_ratio() {
        let (model, pruned, corpus) = fixture(0.5, ReplacementMode::Novice);
        let report = cost_report(&model, &pruned, &corpus, ExecMode::Sequential).unwrap();
        assert_eq!(report.expert_params_after * 2, report.expert_params_before);
        let cfg = &model.config;
        let novices_per_layer = cfg.n_experts / 2;
        assert_eq!(
            report.novice_params_after,
            (cfg.n_layers * novices_per_layer * cfg.d_model) as u64
        );
        assert!(report.memory_bytes_after < report.memory_bytes_before);
        assert!(report.expert_flops_after <= report.expert_flops_before);
        assert!(report.mean_activated_params_after <= report.mean_activated_params_before);
    }

    #[test]
    fn cost_is_non_increasing_in_ratio() {
        let cfg = test_config();
        let model = init_model(&cfg).unwrap();
        let corpus = test_corpus(&cfg, 10, 10, 13);
        let calib = run_calibration(&model, &corpus, ExecMode::Sequential).unwrap();
        let mut prev: Option<CostReport> = None;
        for ratio in [0.0, 0.25, 0.5, 1.0] {
            let plan = build_plan(
                &calib,
                ScoreMethod::Mone,
                ratio,
                ReplacementMode::Novice,
                &BuildOptions::default(),
            )
            .unwrap();
            let pruned = apply_plan(&model, &plan).unwrap();
            let report = cost_report(&model, &pruned, &corpus, ExecMode::Sequential).unwrap();
            if let Some(p) = &prev {
                assert!(report.memory_bytes_after <= p.memory_bytes_after);
                assert!(report.expert_flops_after <= p.expert_flops_after);
                assert!(report.mean_activated_params_after <= p.mean_activated_params_after);
            }
            prev = Some(report);
        }
    }

    #[test]
    fn expert_flops_scale_exactly_with_novice_hits() {
        // Forced router selects {0, 1}; pruning expert 0 gives j = 1 novice
        // hit per (token, layer): after/before = (k-1)/k exactly.
        let cfg = test_config();
        let mut model = init_model(&cfg).unwrap();
        for block in model.blocks.iter_mut() {
            block.moe.router.w_gate = Matrix::zeros(cfg.d_model, cfg.n_experts);
        }
        let corpus = test_corpus(&cfg, 5, 8, 77);
        let calib = run_calibration(&model, &corpus, ExecMode::Sequential).unwrap();
        let mut plan = build_plan(
            &calib,
            ScoreMethod::Mone,
            0.25,
            ReplacementMode::Novice,
            &BuildOptions::default(),
        )
        .unwrap();
        for layer in plan.layers.iter_mut() {
            layer.prune_set = vec![0];
            layer.novices = vec![calib.layers[layer.scores.layer_index][0].mean_output.clone()];
        }
        let pruned = apply_plan(&model, &plan).unwrap();
        let report = cost_report(&model, &pruned, &corpus, ExecMode::Sequential).unwrap();
        let k = cfg.top_k as u64;
        assert_eq!(report.expert_flops_after * k, report.expert_flops_before * (k - 1));
        // Every (token, layer) hit exactly one novice.
        assert_eq!(report.novice_hits, report.tokens * cfg.n_layers as u64);
        assert_eq!(report.novice_lookup_entries, report.novice_hits * cfg.d_model as u64);
    }

    #[test]
    fn incompatible_models_are_rejected() {
        let cfg = test_config();
        let model = init_model(&cfg).unwrap();
        let mut other_cfg = cfg.clone();
        other_cfg.vocab_size = 19;
        let other = init_model(&other_cfg).unwrap();
        let corpus = test_corpus(&cfg, 2, 8, 1);
        let err = logit_discrepancy(&model, &other, &corpus, ExecMode::Sequential).unwrap_err();
        assert!(matches!(err, MoneError::Compatibility(_)));
    }

    #[test]
    fn heatmap_csv_shares_sum_to_one_per_layer() {
        let cfg = test_config();
        let model = init_model(&cfg).unwrap();
        let corpus = test_corpus(&cfg, 6, 10, 4);
        let calib = run_calibration(&model, &corpus, ExecMode::Sequential).unwrap();
        let csv = heatmap_csv(&calib);
        assert!(csv.starts_with("layer,expert,n_frac,sigma_l2\n"));
        // Shares within one layer sum to 1 because every token activates
        // exactly k experts.
        let mut per_layer = vec![0.0f64; cfg.n_layers];
        for line in csv.lines().skip(1) {
            let fields: Vec<&str> = line.split(',').collect();
            let layer: usize = fields[0].parse().unwrap();
            let frac: f64 = fields[2].parse().unwrap();
            per_layer[layer] += frac;
        }
        for s in per_layer {
            assert!((s - 1.0).abs() < 1e-9);
        }
    }
}
