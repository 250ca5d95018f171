//! Pruning plans and the novice-transformed model.
//!
//! A plan records, per layer, which experts to remove and the constant
//! novice vector standing in for each of them. Applying a plan produces a
//! model whose MoE layers route exactly as before but answer selections of
//! pruned experts with a gate-weighted table lookup instead of a matmul
//! (the pruned weight matrices are physically absent).

use std::collections::BTreeMap;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::calibration::CalibrationRun;
use crate::error::{MoneError, Result};
use crate::model::{
    Expert, FfnLayer, ModelConfig, MoEModel, Router, TransformerModel,
};
use crate::redundancy::{score_layer, select_prune_set, FreqNorm, LayerScores, ScoreMethod, ScoringOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplacementMode {
    /// Pruned experts answer with their calibration mean output.
    Novice,
    /// Pruned experts answer with the zero vector; isolates the value of
    /// novice replacement as a one-field diff.
    Drop,
}

/// Novice vectors keyed by pruned expert index.
pub type NoviceTable = BTreeMap<usize, Vec<f64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanLayer {
    /// Ascending expert indices to prune.
    pub prune_set: Vec<usize>,
    /// Parallel to `prune_set`; f32-exact values, stored as base64 LE f32.
    #[serde(serialize_with = "ser_novices", deserialize_with = "de_novices")]
    pub novices: Vec<Vec<f64>>,
    pub scores: LayerScores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruningPlan {
    pub version: u32,
    pub method: ScoreMethod,
    pub ratio: f64,
    pub mode: ReplacementMode,
    /// Rescale the gates of retained selected experts to sum to 1 and drop
    /// the novice terms entirely; off by default.
    pub renormalize_kept_gates: bool,
    pub calibration_fingerprint: String,
    pub model_fingerprint: String,
    pub layers: Vec<PlanLayer>,
}

pub const PLAN_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, Default)]
pub struct BuildOptions {
    pub freq_norm: FreqNorm,
    pub renormalize_kept_gates: bool,
}

/// Score every layer, pick prune sets, and derive novices.
pub fn build_plan(
    calib: &CalibrationRun,
    method: ScoreMethod,
    ratio: f64,
    mode: ReplacementMode,
    opts: &BuildOptions,
) -> Result<PruningPlan> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(MoneError::Config(format!("pruning ratio {ratio} outside [0, 1]")));
    }
    let scoring = ScoringOptions { freq_norm: opts.freq_norm, total_tokens: calib.total_tokens };
    let mut layers = Vec::with_capacity(calib.layers.len());
    for (layer_index, summaries) in calib.layers.iter().enumerate() {
        let scores = score_layer(summaries, method, layer_index, &scoring);
        let prune_set = select_prune_set(&scores, ratio)?;
        let novices = prune_set
            .iter()
            .map(|&e| {
                let summary = &summaries[e];
                // Never-activated experts have no data to estimate a mean
                // from; zero is the least-assumption constant.
                if mode == ReplacementMode::Drop || summary.n == 0 {
                    vec![0.0; calib.config.d_model]
                } else {
                    // Quantize once so the plan file, the checkpoint and the
                    // in-memory model all hold the same constant.
                    summary.mean_output.iter().map(|&v| v as f32 as f64).collect()
                }
            })
            .collect();
        layers.push(PlanLayer { prune_set, novices, scores });
    }
    Ok(PruningPlan {
        version: PLAN_FORMAT_VERSION,
        method,
        ratio,
        mode,
        renormalize_kept_gates: opts.renormalize_kept_gates,
        calibration_fingerprint: calib.fingerprint()?,
        model_fingerprint: calib.model_fingerprint.clone(),
        layers,
    })
}

impl PruningPlan {
    pub fn to_json(&self) -> Result<Vec<u8>> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        Ok(bytes)
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let plan: PruningPlan = serde_json::from_slice(bytes)?;
        if plan.version != PLAN_FORMAT_VERSION {
            return Err(MoneError::Config(format!("unsupported plan version {}", plan.version)));
        }
        Ok(plan)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read(path)?)
    }

    pub fn fingerprint(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_json()?)))
    }

    /// Novice table for one layer.
    pub fn novice_table(&self, layer: usize) -> NoviceTable {
        self.layers[layer]
            .prune_set
            .iter()
            .cloned()
            .zip(self.layers[layer].novices.iter().cloned())
            .collect()
    }
}

fn ser_novices<S: serde::Serializer>(novices: &[Vec<f64>], s: S) -> std::result::Result<S::Ok, S::Error> {
    let encoded: Vec<String> = novices
        .iter()
        .map(|v| {
            let mut bytes = Vec::with_capacity(v.len() * 4);
            for &x in v {
                bytes.extend_from_slice(&(x as f32).to_le_bytes());
            }
            BASE64.encode(&bytes)
        })
        .collect();
    encoded.serialize(s)
}

fn de_novices<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Vec<Vec<f64>>, D::Error> {
    let encoded = Vec::<String>::deserialize(d)?;
    encoded
        .into_iter()
        .map(|s| {
            let bytes = BASE64.decode(s.as_bytes()).map_err(serde::de::Error::custom)?;
            if bytes.len() % 4 != 0 {
                return Err(serde::de::Error::custom("novice blob length not a multiple of 4"));
            }
            Ok(bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect())
        })
        .collect()
}

/// One routed selection in a pruned layer, for cost accounting.
#[derive(Debug, Clone, Copy)]
pub struct SelectionHit {
    pub index: usize,
    pub gate: f64,
    pub novice: bool,
}

/// MoE layer after pruning: the router is unchanged and still scores all M
/// slots; selections of pruned slots read the novice table.
#[derive(Debug, Clone)]
pub struct MoNELayer {
    pub router: Router,
    pub retained: BTreeMap<usize, Expert>,
    pub novices: NoviceTable,
    pub n_experts: usize,
    pub renormalize_kept_gates: bool,
}

impl MoNELayer {
    pub fn forward(&self, x: &[f64], top_k: usize, renormalize: bool) -> Result<Vec<f64>> {
        self.forward_traced(x, top_k, renormalize).map(|(y, _)| y)
    }

    pub fn forward_traced(
        &self,
        x: &[f64],
        top_k: usize,
        renormalize: bool,
    ) -> Result<(Vec<f64>, Vec<SelectionHit>)> {
        let (_, selected) = self.router.route(x, top_k, renormalize)?;
        let kept_scale = if self.renormalize_kept_gates {
            let kept: f64 = selected
                .iter()
                .filter(|(i, _)| self.retained.contains_key(i))
                .map(|(_, g)| g)
                .sum();
            if kept > 0.0 {
                Some(1.0 / kept)
            } else {
                None
            }
        } else {
            None
        };
        let mut y = vec![0.0f64; x.len()];
        let mut hits = Vec::with_capacity(selected.len());
        for (index, gate) in selected {
            if let Some(expert) = self.retained.get(&index) {
                let applied = kept_scale.map_or(gate, |s| gate * s);
                let out = expert.forward(x);
                for (acc, &o) in y.iter_mut().zip(&out) {
                    *acc += applied * o;
                }
                hits.push(SelectionHit { index, gate: applied, novice: false });
            } else {
                if !self.renormalize_kept_gates {
                    let novice = self.novices.get(&index).ok_or_else(|| {
                        MoneError::Shape(format!("expert {index} neither retained nor pruned"))
                    })?;
                    for (acc, &n) in y.iter_mut().zip(novice) {
                        *acc += gate * n;
                    }
                }
                hits.push(SelectionHit { index, gate, novice: true });
            }
        }
        Ok((y, hits))
    }
}

impl FfnLayer for MoNELayer {
    type TokenTrace = Vec<SelectionHit>;

    fn forward(&self, x: &[f64], top_k: usize, renormalize: bool) -> Result<Vec<f64>> {
        MoNELayer::forward(self, x, top_k, renormalize)
    }

    fn forward_traced(
        &self,
        x: &[f64],
        top_k: usize,
        renormalize: bool,
    ) -> Result<(Vec<f64>, Self::TokenTrace)> {
        MoNELayer::forward_traced(self, x, top_k, renormalize)
    }
}

pub type MoNEModel = TransformerModel<MoNELayer>;

/// Substitute MoNE layers per the plan. Routers and all non-MoE parameters
/// are carried over untouched.
pub fn apply_plan(model: &MoEModel, plan: &PruningPlan) -> Result<MoNEModel> {
    let model_fp = crate::checkpoint::model_fingerprint(model)?;
    if plan.model_fingerprint != model_fp {
        return Err(MoneError::Compatibility(format!(
            "plan was built for model {} but got {}",
            &plan.model_fingerprint[..12.min(plan.model_fingerprint.len())],
            &model_fp[..12]
        )));
    }
    if plan.layers.len() != model.blocks.len() {
        return Err(MoneError::Compatibility(format!(
            "plan has {} layers, model has {}",
            plan.layers.len(),
            model.blocks.len()
        )));
    }
    let m = model.config.n_experts;
    let d = model.config.d_model;
    let mut blocks = Vec::with_capacity(model.blocks.len());
    for (block, layer_plan) in model.blocks.iter().zip(&plan.layers) {
        for &e in &layer_plan.prune_set {
            if e >= m {
                return Err(MoneError::Compatibility(format!(
                    "prune set names expert {e} but the layer has {m}"
                )));
            }
        }
        for novice in &layer_plan.novices {
            if novice.len() != d {
                return Err(MoneError::Shape(format!(
                    "novice vector has dim {}, expected {d}",
                    novice.len()
                )));
            }
        }
        let pruned: BTreeMap<usize, Vec<f64>> = layer_plan
            .prune_set
            .iter()
            .cloned()
            .zip(layer_plan.novices.iter().cloned())
            .collect();
        let retained: BTreeMap<usize, Expert> = (0..m)
            .filter(|i| !pruned.contains_key(i))
            .map(|i| (i, block.moe.experts[i].clone()))
            .collect();
        blocks.push(crate::model::Block {
            attn_norm: block.attn_norm.clone(),
            attn: block.attn.clone(),
            ffn_norm: block.ffn_norm.clone(),
            moe: MoNELayer {
                router: block.moe.router.clone(),
                retained,
                novices: pruned,
                n_experts: m,
                renormalize_kept_gates: plan.renormalize_kept_gates,
            },
        });
    }
    Ok(TransformerModel {
        config: model.config.clone(),
        token_embedding: model.token_embedding.clone(),
        blocks,
        final_norm: model.final_norm.clone(),
        lm_head: model.lm_head.clone(),
    })
}

/// View a dense model as a pruned model with nothing pruned. Forward is
/// bit-identical to the original.
pub fn identity_mone(model: &MoEModel) -> MoNEModel {
    let blocks = model
        .blocks
        .iter()
        .map(|b| crate::model::Block {
            attn_norm: b.attn_norm.clone(),
            attn: b.attn.clone(),
            ffn_norm: b.ffn_norm.clone(),
            moe: MoNELayer {
                router: b.moe.router.clone(),
                retained: b.moe.experts.iter().cloned().enumerate().collect(),
                novices: BTreeMap::new(),
                n_experts: b.moe.experts.len(),
                renormalize_kept_gates: false,
            },
        })
        .collect();
    TransformerModel {
        config: model.config.clone(),
        token_embedding: model.token_embedding.clone(),
        blocks,
        final_norm: model.final_norm.clone(),
        lm_head: model.lm_head.clone(),
    }
}

impl MoNEModel {
    pub fn param_counts(&self) -> crate::model::ParamCounts {
        let mut expert = 0u64;
        let mut novice = 0u64;
        let mut other = self.token_embedding.len() as u64 + self.lm_head.len() as u64;
        other += self.final_norm.weight.len() as u64;
        for b in &self.blocks {
            other += (b.attn_norm.weight.len() + b.ffn_norm.weight.len()) as u64;
            other += (b.attn.wq.len() + b.attn.wk.len() + b.attn.wv.len() + b.attn.wo.len()) as u64;
            other += b.moe.router.w_gate.len() as u64;
            for e in b.moe.retained.values() {
                expert += e.param_count();
            }
            for n in b.moe.novices.values() {
                novice += n.len() as u64;
            }
        }
        crate::model::ParamCounts { total: expert + novice + other, expert, novice, other }
    }
}

/// Expert parameters actually multiplied for one token that hit `novice_hits`
/// novices out of its k selections.
pub fn activated_expert_params(config: &ModelConfig, novice_hits: usize) -> u64 {
    let per_expert = 2 * config.d_model as u64 * config.d_expert as u64;
    (config.top_k as u64 - novice_hits as u64) * per_expert
}

/// Novice table entries read for one token (lookup, not matmul).
pub fn activated_novice_entries(config: &ModelConfig, novice_hits: usize) -> u64 {
    novice_hits as u64 * config.d_model as u64
}
