//! Expert redundancy scoring and prune-set selection.
//!
//! The fused score multiplies a variance term (L2 norm of the per-coordinate
//! output standard deviation) by a frequency term (mean routing score over
//! activations). Lower score means more redundant. Ablation scorers and the
//! routing-score baseline live here too; all of them are pure functions over
//! calibration summaries, trivially parallel across layers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calibration::ExpertSummary;
use crate::error::{MoneError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScoreMethod {
    /// Fused variance x frequency redundancy.
    Mone,
    /// Variance term alone.
    VarOnly,
    /// Frequency term alone.
    FreqOnly,
    /// Total routing mass, so rarely accessed experts score low.
    RoutingScoreRs,
    /// Seeded uniform scores; control baseline.
    Random { seed: u64 },
}

impl ScoreMethod {
    pub fn label(&self) -> &'static str {
        match self {
            ScoreMethod::Mone => "mone",
            ScoreMethod::VarOnly => "var_only",
            ScoreMethod::FreqOnly => "freq_only",
            ScoreMethod::RoutingScoreRs => "rs",
            ScoreMethod::Random { .. } => "random",
        }
    }
}

/// Normalization of the frequency term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreqNorm {
    /// Mean routing score over the expert's own activations (score_sum / n).
    #[default]
    ActivationMean,
    /// Routing mass per calibration token (score_sum / total_tokens), so raw
    /// access frequency does not cancel out of the score.
    TokenVolume,
}

#[derive(Debug, Clone, Copy)]
pub struct ScoringOptions {
    pub freq_norm: FreqNorm,
    /// Token count of the calibration run; only used by `TokenVolume`.
    pub total_tokens: u64,
}

impl ScoringOptions {
    pub fn new(total_tokens: u64) -> Self {
        ScoringOptions { freq_norm: FreqNorm::default(), total_tokens }
    }
}

/// Per-layer scores for all M experts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerScores {
    pub layer_index: usize,
    /// The score actually used for selection.
    pub phi: Vec<f64>,
    pub phi_var: Vec<f64>,
    pub phi_freq: Vec<f64>,
    pub method: ScoreMethod,
    pub degenerate: Vec<bool>,
}

/// L2 norm of the per-coordinate output standard deviation. Degenerate
/// summaries score zero.
pub fn phi_var(summary: &ExpertSummary) -> f64 {
    if summary.degenerate {
        return 0.0;
    }
    summary.var_unbiased.iter().map(|&v| v.max(0.0)).sum::<f64>().sqrt()
}

/// Mean routing score over the expert's activations; zero if never activated.
pub fn phi_freq(summary: &ExpertSummary) -> f64 {
    if summary.n == 0 {
        0.0
    } else {
        summary.score_sum / summary.n as f64
    }
}

/// Routing mass per calibration token.
pub fn phi_freq_volume(summary: &ExpertSummary, total_tokens: u64) -> f64 {
    if total_tokens == 0 {
        0.0
    } else {
        summary.score_sum / total_tokens as f64
    }
}

/// Fused redundancy score. Lower means more redundant.
pub fn phi_fused(summary: &ExpertSummary) -> f64 {
    phi_var(summary) * phi_freq(summary)
}

/// Score one layer's experts with the given method.
pub fn score_layer(
    summaries: &[ExpertSummary],
    method: ScoreMethod,
    layer_index: usize,
    opts: &ScoringOptions,
) -> LayerScores {
    let freq = |s: &ExpertSummary| match opts.freq_norm {
        FreqNorm::ActivationMean => phi_freq(s),
        FreqNorm::TokenVolume => phi_freq_volume(s, opts.total_tokens),
    };
    let phi_var_v: Vec<f64> = summaries.iter().map(phi_var).collect();
    let phi_freq_v: Vec<f64> = summaries.iter().map(freq).collect();
    let phi = match method {
        ScoreMethod::Mone => {
            phi_var_v.iter().zip(&phi_freq_v).map(|(v, f)| v * f).collect()
        }
        ScoreMethod::VarOnly => phi_var_v.clone(),
        ScoreMethod::FreqOnly => phi_freq_v.clone(),
        ScoreMethod::RoutingScoreRs => summaries.iter().map(|s| s.score_sum).collect(),
        ScoreMethod::Random { seed } => {
            let mut rng =
                ChaCha8Rng::seed_from_u64(seed.wrapping_add(layer_index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            (0..summaries.len()).map(|_| rng.random::<f64>()).collect()
        }
    };
    LayerScores {
        layer_index,
        phi,
        phi_var: phi_var_v,
        phi_freq: phi_freq_v,
        method,
        degenerate: summaries.iter().map(|s| s.degenerate).collect(),
    }
}

/// Select the round(ratio * M) lowest-scoring experts, ties broken by
/// ascending index. Returned indices are sorted ascending.
pub fn select_prune_set(scores: &LayerScores, ratio: f64) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(MoneError::Config(format!("pruning ratio {ratio} outside [0, 1]")));
    }
    let m = scores.phi.len();
    // Half-up rounding.
    let count = ((ratio * m as f64) + 0.5).floor() as usize;
    let count = count.min(m);
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| {
        scores.phi[a]
            .partial_cmp(&scores.phi[b])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut selected: Vec<usize> = order[..count].to_vec();
    selected.sort_unstable();
    Ok(selected)
}

/// One row per (layer, expert), matching the order of `layers`.
pub fn layer_scores_csv(layers: &[LayerScores]) -> String {
    let mut out = String::from("layer,expert,phi_var,phi_freq,phi,method,degenerate\n");
    for scores in layers {
        for e in 0..scores.phi.len() {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                scores.layer_index,
                e,
                scores.phi_var[e],
                scores.phi_freq[e],
                scores.phi[e],
                scores.method.label(),
                scores.degenerate[e]
            ));
        }
    }
    out
}
