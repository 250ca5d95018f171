//! Per-expert calibration statistics.
//!
//! Streams a token corpus through the model and accumulates, for every
//! (layer, expert), the activation count, routing-score sum and online
//! mean/variance of the raw expert outputs. Accumulation is Welford-style
//! with a pairwise merge so shard-per-worker parallelism reassociates the
//! same sums; naive sum-of-squares would cancel catastrophically on long
//! corpora.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::sequences_fingerprint;
use crate::error::{MoneError, Result};
use crate::exec::{map_chunks_ordered, ExecMode};
use crate::linalg::all_finite;
use crate::model::{MoEModel, ModelConfig, TokenId};

/// Streaming moments for one expert: count, score mass, running mean and
/// running sum of squared deviations, all per output coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertAccumulator {
    pub n: u64,
    pub score_sum: f64,
    pub mean: Vec<f64>,
    pub m2: Vec<f64>,
}

impl ExpertAccumulator {
    pub fn new(dim: usize) -> Self {
        ExpertAccumulator { n: 0, score_sum: 0.0, mean: vec![0.0; dim], m2: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Record one activation: the expert's raw output and its routing score.
    pub fn observe(&mut self, output: &[f64], score: f64) -> Result<()> {
        if output.len() != self.dim() {
            return Err(MoneError::Shape(format!(
                "observation dim {} does not match accumulator dim {}",
                output.len(),
                self.dim()
            )));
        }
        if !all_finite(output) || !score.is_finite() {
            return Err(MoneError::NumericInput("non-finite calibration observation".into()));
        }
        debug_assert!((0.0..=1.0).contains(&score), "routing score {score} outside [0,1]");
        self.n += 1;
        self.score_sum += score;
        let n = self.n as f64;
        for ((m, s), &x) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(output) {
            let delta = x - *m;
            *m += delta / n;
            *s += delta * (x - *m);
        }
        Ok(())
    }

    /// Pairwise moment merge. `merge(a, empty)` returns `a` unchanged.
    pub fn merge(&self, other: &ExpertAccumulator) -> Result<ExpertAccumulator> {
        if self.dim() != other.dim() {
            return Err(MoneError::Shape(format!(
                "cannot merge accumulators of dim {} and {}",
                self.dim(),
                other.dim()
            )));
        }
        let n = self.n + other.n;
        if n == 0 {
            return Ok(self.clone());
        }
        let (na, nb) = (self.n as f64, other.n as f64);
        let nf = n as f64;
        let mut mean = Vec::with_capacity(self.dim());
        let mut m2 = Vec::with_capacity(self.dim());
        for i in 0..self.dim() {
            let delta = other.mean[i] - self.mean[i];
            mean.push(self.mean[i] + delta * (nb / nf));
            m2.push(self.m2[i] + other.m2[i] + delta * delta * (na * nb / nf));
        }
        Ok(ExpertAccumulator { n, score_sum: self.score_sum + other.score_sum, mean, m2 })
    }

    /// Finalized statistics. Degeneracy (n <= 1) is flagged, never an error:
    /// unused experts should rank maximally redundant downstream.
    pub fn finalize(&self) -> ExpertSummary {
        let degenerate = self.n < 2;
        let var_unbiased = if self.n >= 2 {
            let denom = (self.n - 1) as f64;
            self.m2.iter().map(|&s| s / denom).collect()
        } else {
            vec![0.0; self.dim()]
        };
        let mean_score = if self.n >= 1 { self.score_sum / self.n as f64 } else { 0.0 };
        ExpertSummary {
            n: self.n,
            score_sum: self.score_sum,
            mean_output: self.mean.clone(),
            var_unbiased,
            mean_score,
            degenerate,
        }
    }
}

/// Finalized per-expert statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertSummary {
    pub n: u64,
    /// Total routing-score mass over all activations.
    pub score_sum: f64,
    /// Mean raw output over activations (the closed-form novice).
    pub mean_output: Vec<f64>,
    /// Per-coordinate sample variance, n-1 denominator; zero when degenerate.
    pub var_unbiased: Vec<f64>,
    /// score_sum / n; zero when never activated.
    pub mean_score: f64,
    /// n <= 1: variance undefined, treated as zero.
    pub degenerate: bool,
}

/// Calibration output: finalized summaries for every (layer, expert), plus
/// the lineage needed to check compatibility downstream.
#[derive(Debug, Clone)]
pub struct CalibrationRun {
    /// Indexed `layers[layer][expert]`.
    pub layers: Vec<Vec<ExpertSummary>>,
    pub total_tokens: u64,
    pub corpus_fingerprint: String,
    pub model_fingerprint: String,
    pub config: ModelConfig,
}

/// Run the corpus through the model and accumulate statistics for exactly
/// the k selected experts at every (layer, position). Raw outputs are
/// observed, never gate-weighted ones.
pub fn run_calibration(
    model: &MoEModel,
    sequences: &[Vec<TokenId>],
    mode: ExecMode,
) -> Result<CalibrationRun> {
    if sequences.is_empty() {
        return Err(MoneError::Input("empty calibration corpus".into()));
    }
    let n_layers = model.config.n_layers;
    let n_experts = model.config.n_experts;
    let d = model.config.d_model;

    let shards: Vec<Result<Vec<Vec<ExpertAccumulator>>>> = match mode {
        ExecMode::Sequential => {
            // Single stream, corpus order.
            vec![accumulate_shard(model, sequences, n_layers, n_experts, d)]
        }
        ExecMode::Parallel => map_chunks_ordered(sequences, mode, |chunk| {
            accumulate_shard(model, chunk, n_layers, n_experts, d)
        }),
    };

    let mut merged: Vec<Vec<ExpertAccumulator>> = (0..n_layers)
        .map(|_| (0..n_experts).map(|_| ExpertAccumulator::new(d)).collect())
        .collect();
    for shard in shards {
        let shard = shard?;
        for (layer_acc, layer_shard) in merged.iter_mut().zip(shard) {
            for (acc, part) in layer_acc.iter_mut().zip(layer_shard) {
                *acc = acc.merge(&part)?;
            }
        }
    }

    let total_tokens: u64 = sequences.iter().map(|s| s.len() as u64).sum();
    let layers: Vec<Vec<ExpertSummary>> =
        merged.iter().map(|l| l.iter().map(|a| a.finalize()).collect()).collect();

    Ok(CalibrationRun {
        layers,
        total_tokens,
        corpus_fingerprint: sequences_fingerprint(sequences),
        model_fingerprint: crate::checkpoint::model_fingerprint(model)?,
        config: model.config.clone(),
    })
}

fn accumulate_shard(
    model: &MoEModel,
    sequences: &[Vec<TokenId>],
    n_layers: usize,
    n_experts: usize,
    d: usize,
) -> Result<Vec<Vec<ExpertAccumulator>>> {
    let mut accs: Vec<Vec<ExpertAccumulator>> = (0..n_layers)
        .map(|_| (0..n_experts).map(|_| ExpertAccumulator::new(d)).collect())
        .collect();
    for seq in sequences {
        let (_, trace) = model.forward_traced(seq)?;
        for (layer_accs, layer_trace) in accs.iter_mut().zip(&trace.layers) {
            for token in layer_trace {
                for sel in &token.ffn {
                    layer_accs[sel.index].observe(&sel.output, sel.gate)?;
                }
            }
        }
    }
    Ok(accs)
}

// --- serialization ------------------------------------------------------
//
// Layout: u32 LE header length, UTF-8 JSON header (fingerprints, config,
// counts), then for every (layer, expert) in order the mean vector and the
// variance vector as little-endian f64 blobs.

#[derive(Serialize, Deserialize)]
struct CalibHeader {
    version: u32,
    model_fingerprint: String,
    corpus_fingerprint: String,
    total_tokens: u64,
    config: ModelConfig,
    layers: Vec<Vec<CalibExpertHeader>>,
}

#[derive(Serialize, Deserialize)]
struct CalibExpertHeader {
    n: u64,
    score_sum: f64,
    mean_score: f64,
    degenerate: bool,
}

pub const CALIBRATION_FORMAT_VERSION: u32 = 1;

impl CalibrationRun {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = CalibHeader {
            version: CALIBRATION_FORMAT_VERSION,
            model_fingerprint: self.model_fingerprint.clone(),
            corpus_fingerprint: self.corpus_fingerprint.clone(),
            total_tokens: self.total_tokens,
            config: self.config.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| {
                    l.iter()
                        .map(|s| CalibExpertHeader {
                            n: s.n,
                            score_sum: s.score_sum,
                            mean_score: s.mean_score,
                            degenerate: s.degenerate,
                        })
                        .collect()
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(4 + json.len());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for layer in &self.layers {
            for s in layer {
                for &v in &s.mean_output {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                for &v in &s.var_unbiased {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(MoneError::format_at(0, "calibration file shorter than header length"));
        }
        let json_len = u32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as usize;
        if bytes.len() < 4 + json_len {
            return Err(MoneError::format_at(4, "truncated calibration header"));
        }
        let header: CalibHeader = serde_json::from_slice(&bytes[4..4 + json_len])
            .map_err(|e| MoneError::format_at(4, format!("bad calibration header: {e}")))?;
        if header.version != CALIBRATION_FORMAT_VERSION {
            return Err(MoneError::format_at(4, format!("unsupported version {}", header.version)));
        }
        let d = header.config.d_model;
        let mut offset = 4 + json_len;
        let mut layers = Vec::with_capacity(header.layers.len());
        for layer in &header.layers {
            let mut summaries = Vec::with_capacity(layer.len());
            for eh in layer {
                let mean_output = read_f64_vec(bytes, &mut offset, d)?;
                let var_unbiased = read_f64_vec(bytes, &mut offset, d)?;
                summaries.push(ExpertSummary {
                    n: eh.n,
                    score_sum: eh.score_sum,
                    mean_output,
                    var_unbiased,
                    mean_score: eh.mean_score,
                    degenerate: eh.degenerate,
                });
            }
            layers.push(summaries);
        }
        if offset != bytes.len() {
            return Err(MoneError::format_at(offset as u64, "trailing bytes after calibration blobs"));
        }
        Ok(CalibrationRun {
            layers,
            total_tokens: header.total_tokens,
            corpus_fingerprint: header.corpus_fingerprint,
            model_fingerprint: header.model_fingerprint,
            config: header.config,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Content hash of the serialized run.
    pub fn fingerprint(&self) -> Result<String> {
        let bytes = self.to_bytes()?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }

    /// Companion export for heatmap plotting: one row per (layer, expert).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,expert,n,mean_score,sigma_l2\n");
        for (l, layer) in self.layers.iter().enumerate() {
            for (e, s) in layer.iter().enumerate() {
                let sigma_l2 = s.var_unbiased.iter().sum::<f64>().max(0.0).sqrt();
                out.push_str(&format!("{},{},{},{},{}\n", l, e, s.n, s.mean_score, sigma_l2));
            }
        }
        out
    }
}

fn read_f64_vec(bytes: &[u8], offset: &mut usize, len: usize) -> Result<Vec<f64>> {
    let end = *offset + len * 8;
    if bytes.len() < end {
        return Err(MoneError::format_at(*offset as u64, "truncated calibration blob"));
    }
    let v = bytes[*offset..end]
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]]))
        .collect();
    *offset = end;
    Ok(v)
}
