//! Checkpoint format for dense and pruned models.
//!
//! Layout: magic "MONE", u32 LE version (= 1), u32 LE JSON metadata length,
//! UTF-8 JSON (config plus an ordered tensor manifest, and for pruned models
//! the per-layer retained/pruned index lists), then each tensor's raw
//! little-endian f32 values in manifest order with no padding.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{MoneError, Result};
use crate::linalg::{Matrix, RmsNorm};
use crate::model::{Attention, Block, Expert, MoEModel, ModelConfig, Router, TransformerModel};
use crate::pruning::{MoNELayer, MoNEModel};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MONE";
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PrunedLayerMeta {
    retained: Vec<usize>,
    pruned: Vec<usize>,
}

/// Fingerprints of the inputs a pruned checkpoint was derived from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrunedLineage {
    pub source_model: String,
    pub calibration: String,
    pub plan: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PruningMeta {
    renormalize_kept_gates: bool,
    layers: Vec<PrunedLayerMeta>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    lineage: Option<PrunedLineage>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pruning: Option<PruningMeta>,
}

/// A loaded checkpoint: either a dense model or a pruned one (with the
/// lineage recorded when it was written).
#[derive(Debug)]
pub enum AnyModel {
    Dense(MoEModel),
    Pruned { model: MoNEModel, lineage: Option<PrunedLineage> },
}

impl AnyModel {
    pub fn config(&self) -> &ModelConfig {
        match self {
            AnyModel::Dense(m) => &m.config,
            AnyModel::Pruned { model, .. } => &model.config,
        }
    }

    pub fn forward(&self, tokens: &[crate::model::TokenId]) -> Result<Vec<Vec<f64>>> {
        match self {
            AnyModel::Dense(m) => m.forward(tokens),
            AnyModel::Pruned { model, .. } => model.forward(tokens),
        }
    }

    pub fn into_dense(self) -> Result<MoEModel> {
        match self {
            AnyModel::Dense(m) => Ok(m),
            AnyModel::Pruned { .. } => {
                Err(MoneError::Compatibility("expected a dense checkpoint, got a pruned one".into()))
            }
        }
    }

    /// Content hash of the model itself; lineage metadata does not enter
    /// the identity.
    pub fn fingerprint(&self) -> Result<String> {
        match self {
            AnyModel::Dense(m) => model_fingerprint(m),
            AnyModel::Pruned { model, .. } => pruned_fingerprint(model),
        }
    }
}

// --- writing --------------------------------------------------------------

struct Writer {
    tensors: Vec<TensorEntry>,
    blob: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Writer { tensors: Vec::new(), blob: Vec::new() }
    }

    fn matrix(&mut self, name: String, m: &Matrix) {
        self.tensors.push(TensorEntry { name, shape: vec![m.rows, m.cols] });
        self.blob.extend_from_slice(&m.to_f32_le_bytes());
    }

    fn vector(&mut self, name: String, v: &[f64]) {
        self.tensors.push(TensorEntry { name, shape: vec![v.len()] });
        for &x in v {
            self.blob.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }

    fn finish(self, config: &ModelConfig, pruning: Option<PruningMeta>) -> Result<Vec<u8>> {
        let header =
            CheckpointHeader { config: config.clone(), tensors: self.tensors, pruning };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(12 + json.len() + self.blob.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&self.blob);
        Ok(out)
    }
}

fn write_common_prefix(w: &mut Writer, model_embedding: &Matrix) {
    w.matrix("token_embedding".into(), model_embedding);
}

fn write_block_prefix(w: &mut Writer, i: usize, attn_norm: &RmsNorm, attn: &Attention, ffn_norm: &RmsNorm, w_gate: &Matrix) {
    w.vector(format!("blocks.{i}.attn_norm.weight"), &attn_norm.weight);
    w.matrix(format!("blocks.{i}.attn.wq"), &attn.wq);
    w.matrix(format!("blocks.{i}.attn.wk"), &attn.wk);
    w.matrix(format!("blocks.{i}.attn.wv"), &attn.wv);
    w.matrix(format!("blocks.{i}.attn.wo"), &attn.wo);
    w.vector(format!("blocks.{i}.ffn_norm.weight"), &ffn_norm.weight);
    w.matrix(format!("blocks.{i}.moe.router.w_gate"), w_gate);
}

fn write_common_suffix(w: &mut Writer, final_norm: &RmsNorm, lm_head: &Matrix) {
    w.vector("final_norm.weight".into(), &final_norm.weight);
    w.matrix("lm_head".into(), lm_head);
}

pub fn model_to_bytes(model: &MoEModel) -> Result<Vec<u8>> {
    let mut w = Writer::new();
    write_common_prefix(&mut w, &model.token_embedding);
    for (i, b) in model.blocks.iter().enumerate() {
        write_block_prefix(&mut w, i, &b.attn_norm, &b.attn, &b.ffn_norm, &b.moe.router.w_gate);
        for (e, expert) in b.moe.experts.iter().enumerate() {
            w.matrix(format!("blocks.{i}.moe.experts.{e}.w_up"), &expert.w_up);
            w.matrix(format!("blocks.{i}.moe.experts.{e}.w_down"), &expert.w_down);
        }
    }
    write_common_suffix(&mut w, &model.final_norm, &model.lm_head);
    w.finish(&model.config, None)
}

/// Canonical (lineage-free) serialization; its hash is the model identity.
pub fn pruned_to_bytes(model: &MoNEModel) -> Result<Vec<u8>> {
    pruned_to_bytes_with_lineage(model, None)
}

pub fn pruned_to_bytes_with_lineage(
    model: &MoNEModel,
    lineage: Option<&PrunedLineage>,
) -> Result<Vec<u8>> {
    let mut w = Writer::new();
    write_common_prefix(&mut w, &model.token_embedding);
    let mut meta_layers = Vec::with_capacity(model.blocks.len());
    let d = model.config.d_model;
    for (i, b) in model.blocks.iter().enumerate() {
        write_block_prefix(&mut w, i, &b.attn_norm, &b.attn, &b.ffn_norm, &b.moe.router.w_gate);
        for (&e, expert) in &b.moe.retained {
            w.matrix(format!("blocks.{i}.moe.experts.{e}.w_up"), &expert.w_up);
            w.matrix(format!("blocks.{i}.moe.experts.{e}.w_down"), &expert.w_down);
        }
        // One novice tensor per layer, rows in ascending pruned-index order.
        let pruned: Vec<usize> = b.moe.novices.keys().cloned().collect();
        w.tensors.push(TensorEntry {
            name: format!("blocks.{i}.moe.novices"),
            shape: vec![pruned.len(), d],
        });
        for novice in b.moe.novices.values() {
            for &x in novice {
                w.blob.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        meta_layers.push(PrunedLayerMeta {
            retained: b.moe.retained.keys().cloned().collect(),
            pruned,
        });
    }
    write_common_suffix(&mut w, &model.final_norm, &model.lm_head);
    let meta = PruningMeta {
        renormalize_kept_gates: model.blocks.first().is_some_and(|b| b.moe.renormalize_kept_gates),
        layers: meta_layers,
        lineage: lineage.cloned(),
    };
    w.finish(&model.config, Some(meta))
}

pub fn save_model(model: &MoEModel, path: &std::path::Path) -> Result<()> {
    std::fs::write(path, model_to_bytes(model)?)?;
    Ok(())
}

pub fn save_pruned(
    model: &MoNEModel,
    lineage: Option<&PrunedLineage>,
    path: &std::path::Path,
) -> Result<()> {
    std::fs::write(path, pruned_to_bytes_with_lineage(model, lineage)?)?;
    Ok(())
}

// --- reading ----------------------------------------------------------------

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
    tensors: std::collections::VecDeque<TensorEntry>,
}

impl<'a> Reader<'a> {
    fn take(&mut self, name: &str, shape: &[usize]) -> Result<Vec<f64>> {
        let entry = self.tensors.pop_front().ok_or_else(|| {
            MoneError::format_at(self.offset as u64, format!("manifest ended before tensor {name}"))
        })?;
        if entry.name != name || entry.shape != shape {
            return Err(MoneError::format_at(
                self.offset as u64,
                format!(
                    "expected tensor {name} with shape {shape:?}, manifest has {} {:?}",
                    entry.name, entry.shape
                ),
            ));
        }
        let count: usize = shape.iter().product();
        let end = self.offset + count * 4;
        if self.bytes.len() < end {
            return Err(MoneError::format_at(self.offset as u64, format!("truncated tensor {name}")));
        }
        let data = self.bytes[self.offset..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        self.offset = end;
        Ok(data)
    }

    fn matrix(&mut self, name: &str, rows: usize, cols: usize) -> Result<Matrix> {
        Ok(Matrix { rows, cols, data: self.take(name, &[rows, cols])? })
    }

    fn vector(&mut self, name: &str, len: usize) -> Result<Vec<f64>> {
        self.take(name, &[len])
    }

    fn norm(&mut self, name: &str, len: usize) -> Result<RmsNorm> {
        Ok(RmsNorm { weight: self.vector(name, len)?, eps: 1e-6 })
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<AnyModel> {
    if bytes.len() < 4 || &bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(MoneError::format_at(0, "bad checkpoint magic, expected MONE"));
    }
    if bytes.len() < 12 {
        return Err(MoneError::format_at(4, "truncated checkpoint header"));
    }
    let version = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]);
    if version != CHECKPOINT_FORMAT_VERSION {
        return Err(MoneError::format_at(4, format!("unsupported checkpoint version {version}")));
    }
    let json_len = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
    if bytes.len() < 12 + json_len {
        return Err(MoneError::format_at(8, "metadata length exceeds file size"));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[12..12 + json_len])
        .map_err(|e| MoneError::format_at(12, format!("bad checkpoint metadata: {e}")))?;
    header.config.validate()?;

    let cfg = &header.config;
    let (d, de, m, vocab) = (cfg.d_model, cfg.d_expert, cfg.n_experts, cfg.vocab_size);
    let mut r = Reader {
        bytes,
        offset: 12 + json_len,
        tensors: header.tensors.clone().into(),
    };

    let token_embedding = r.matrix("token_embedding", vocab, d)?;
    let model = if let Some(pruning) = &header.pruning {
        if pruning.layers.len() != cfg.n_layers {
            return Err(MoneError::format_at(
                12,
                format!("pruning metadata covers {} layers, config has {}", pruning.layers.len(), cfg.n_layers),
            ));
        }
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for (i, lm) in pruning.layers.iter().enumerate() {
            let (attn_norm, attn, ffn_norm, w_gate) = read_block_prefix(&mut r, i, d, m)?;
            let mut all: Vec<usize> = lm.retained.iter().chain(&lm.pruned).cloned().collect();
            all.sort_unstable();
            if all != (0..m).collect::<Vec<_>>() {
                return Err(MoneError::format_at(
                    12,
                    format!("layer {i}: retained and pruned indices do not partition 0..{m}"),
                ));
            }
            let mut retained = std::collections::BTreeMap::new();
            for &e in &lm.retained {
                let w_up = r.matrix(&format!("blocks.{i}.moe.experts.{e}.w_up"), d, de)?;
                let w_down = r.matrix(&format!("blocks.{i}.moe.experts.{e}.w_down"), de, d)?;
                retained.insert(e, Expert { w_up, w_down });
            }
            let novice_rows = r.matrix(&format!("blocks.{i}.moe.novices"), lm.pruned.len(), d)?;
            let novices = lm
                .pruned
                .iter()
                .enumerate()
                .map(|(row, &e)| (e, novice_rows.row(row).to_vec()))
                .collect();
            blocks.push(Block {
                attn_norm,
                attn,
                ffn_norm,
                moe: MoNELayer {
                    router: Router { w_gate },
                    retained,
                    novices,
                    n_experts: m,
                    renormalize_kept_gates: pruning.renormalize_kept_gates,
                },
            });
        }
        let final_norm = r.norm("final_norm.weight", d)?;
        let lm_head = r.matrix("lm_head", d, vocab)?;
        AnyModel::Pruned {
            model: TransformerModel {
                config: header.config.clone(),
                token_embedding,
                blocks,
                final_norm,
                lm_head,
            },
            lineage: pruning.lineage.clone(),
        }
    } else {
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for i in 0..cfg.n_layers {
            let (attn_norm, attn, ffn_norm, w_gate) = read_block_prefix(&mut r, i, d, m)?;
            let mut experts = Vec::with_capacity(m);
            for e in 0..m {
                let w_up = r.matrix(&format!("blocks.{i}.moe.experts.{e}.w_up"), d, de)?;
                let w_down = r.matrix(&format!("blocks.{i}.moe.experts.{e}.w_down"), de, d)?;
                experts.push(Expert { w_up, w_down });
            }
            blocks.push(Block {
                attn_norm,
                attn,
                ffn_norm,
                moe: crate::model::MoELayer { router: Router { w_gate }, experts },
            });
        }
        let final_norm = r.norm("final_norm.weight", d)?;
        let lm_head = r.matrix("lm_head", d, vocab)?;
        AnyModel::Dense(TransformerModel {
            config: header.config.clone(),
            token_embedding,
            blocks,
            final_norm,
            lm_head,
        })
    };

    if !r.tensors.is_empty() {
        return Err(MoneError::format_at(r.offset as u64, "manifest lists unexpected extra tensors"));
    }
    if r.offset != bytes.len() {
        return Err(MoneError::format_at(r.offset as u64, "trailing bytes after last tensor"));
    }
    Ok(model)
}

#[allow(clippy::type_complexity)]
fn read_block_prefix(
    r: &mut Reader,
    i: usize,
    d: usize,
    m: usize,
) -> Result<(RmsNorm, Attention, RmsNorm, Matrix)> {
    let attn_norm = r.norm(&format!("blocks.{i}.attn_norm.weight"), d)?;
    let attn = Attention {
        wq: r.matrix(&format!("blocks.{i}.attn.wq"), d, d)?,
        wk: r.matrix(&format!("blocks.{i}.attn.wk"), d, d)?,
        wv: r.matrix(&format!("blocks.{i}.attn.wv"), d, d)?,
        wo: r.matrix(&format!("blocks.{i}.attn.wo"), d, d)?,
    };
    let ffn_norm = r.norm(&format!("blocks.{i}.ffn_norm.weight"), d)?;
    let w_gate = r.matrix(&format!("blocks.{i}.moe.router.w_gate"), d, m)?;
    Ok((attn_norm, attn, ffn_norm, w_gate))
}

pub fn load(path: &std::path::Path) -> Result<AnyModel> {
    from_bytes(&std::fs::read(path)?)
}

/// Content hash of the serialized model (config and parameters).
pub fn model_fingerprint(model: &MoEModel) -> Result<String> {
    Ok(hex::encode(Sha256::digest(model_to_bytes(model)?)))
}

pub fn pruned_fingerprint(model: &MoNEModel) -> Result<String> {
    Ok(hex::encode(Sha256::digest(pruned_to_bytes(model)?)))
}

/// Hash of the serialized config JSON alone.
pub fn config_fingerprint(config: &ModelConfig) -> Result<String> {
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(config)?)))
}
