//! Report documents and their schema.
//!
//! Two kinds share one versioned envelope: `eval` (a single original-vs-
//! pruned comparison) and `ablation_summary` (a method x ratio x mode x
//! calibration grid with difference-to-baseline cells and prune-set overlap
//! matrices). Serialization is byte-stable for fixed inputs: struct fields
//! have a fixed order and every map is a BTreeMap.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{MoneError, Result};
use crate::eval::{CostReport, LayerDiscrepancy, OverlapReport};
use crate::model::ModelConfig;
use crate::pruning::ReplacementMode;
use crate::redundancy::ScoreMethod;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerplexityPair {
    pub original: f64,
    pub pruned: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    /// Always "eval".
    pub kind: String,
    pub config: ModelConfig,
    /// original / pruned / corpus content hashes.
    pub fingerprints: BTreeMap<String, String>,
    pub layers: Vec<LayerDiscrepancy>,
    pub logit_discrepancy: f64,
    pub perplexity: PerplexityPair,
    pub cost: CostReport,
}

/// Identifies one grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellKey {
    pub method: ScoreMethod,
    pub ratio: f64,
    pub mode: ReplacementMode,
    pub sample_size: usize,
    pub source_seed: u64,
}

impl CellKey {
    /// Stable directory/file name for the cell.
    pub fn slug(&self) -> String {
        format!(
            "{}_r{}_{}_n{}_s{}",
            self.method.label(),
            (self.ratio * 100.0).round() as u32,
            match self.mode {
                ReplacementMode::Novice => "novice",
                ReplacementMode::Drop => "drop",
            },
            self.sample_size,
            self.source_seed
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellMetrics {
    pub perplexity: PerplexityPair,
    pub logit_discrepancy: f64,
    pub mean_layer_discrepancy: f64,
    pub cost: CostReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub key: CellKey,
    /// "ok" or an error string for partial failures.
    pub status: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<CellMetrics>,
    pub fingerprints: BTreeMap<String, String>,
}

/// Per-cell difference to the MoNE baseline cell of the same ratio, sample
/// size and source seed. The baseline's own cell is zero by construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffCell {
    pub key: CellKey,
    pub perplexity_delta: f64,
    pub logit_discrepancy_delta: f64,
}

/// Prune-set overlap between two calibration variants of the same method,
/// ratio and mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapCell {
    pub method: ScoreMethod,
    pub ratio: f64,
    pub mode: ReplacementMode,
    pub sample_a: usize,
    pub source_a: u64,
    pub sample_b: usize,
    pub source_b: u64,
    pub overlap: OverlapReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub schema_version: u32,
    /// Always "ablation_summary".
    pub kind: String,
    /// Snapshot of the run configuration.
    pub config: serde_json::Value,
    pub fingerprints: BTreeMap<String, String>,
    pub cells: Vec<CellResult>,
    pub diff_to_mone: Vec<DiffCell>,
    pub overlap: Vec<OverlapCell>,
}

/// Serialize a report document; stable bytes for fixed input.
pub fn report_to_bytes<T: Serialize>(report: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(report)?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// Write a report document to disk.
pub fn emit_report<T: Serialize>(report: &T, path: &std::path::Path) -> Result<()> {
    std::fs::write(path, report_to_bytes(report)?)?;
    Ok(())
}

/// Structural schema check for emitted report documents.
pub fn validate_report(doc: &serde_json::Value) -> Result<()> {
    let obj = doc.as_object().ok_or_else(|| bad("document is not an object"))?;
    let version = obj
        .get("schema_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| bad("missing integer schema_version"))?;
    if version != REPORT_SCHEMA_VERSION as u64 {
        return Err(bad(&format!("unsupported schema_version {version}")));
    }
    let kind = obj.get("kind").and_then(|v| v.as_str()).ok_or_else(|| bad("missing kind"))?;
    match kind {
        "eval" => {
            require(obj, "config", |v| v.is_object())?;
            require(obj, "fingerprints", |v| {
                v.as_object().is_some_and(|f| {
                    ["original", "pruned", "corpus"]
                        .iter()
                        .all(|k| f.get(*k).is_some_and(|s| s.is_string()))
                })
            })?;
            require(obj, "layers", |v| {
                v.as_array().is_some_and(|layers| {
                    layers.iter().all(|l| {
                        l.as_object().is_some_and(|lo| {
                            ["layer_index", "mean_l2", "max_l2", "sum_sq", "token_count"]
                                .iter()
                                .all(|k| lo.get(*k).is_some_and(|x| x.is_number()))
                        })
                    })
                })
            })?;
            require(obj, "logit_discrepancy", |v| v.is_number())?;
            require(obj, "perplexity", |v| {
                v.as_object().is_some_and(|p| {
                    p.get("original").is_some_and(|x| x.is_number())
                        && p.get("pruned").is_some_and(|x| x.is_number())
                })
            })?;
            require(obj, "cost", |v| {
                v.as_object().is_some_and(|c| {
                    [
                        "total_params_before",
                        "total_params_after",
                        "expert_params_before",
                        "expert_params_after",
                        "memory_bytes_before",
                        "memory_bytes_after",
                    ]
                    .iter()
                    .all(|k| c.get(*k).is_some_and(|x| x.is_u64()))
                })
            })?;
        }
        "ablation_summary" => {
            require(obj, "config", |v| v.is_object())?;
            require(obj, "fingerprints", |v| v.is_object())?;
            require(obj, "cells", |v| {
                v.as_array().is_some_and(|cells| {
                    cells.iter().all(|c| {
                        c.as_object().is_some_and(|co| {
                            co.get("key").is_some_and(|k| k.is_object())
                                && co.get("status").is_some_and(|s| s.is_string())
                        })
                    })
                })
            })?;
            require(obj, "diff_to_mone", |v| v.is_array())?;
            require(obj, "overlap", |v| v.is_array())?;
        }
        other => return Err(bad(&format!("unknown report kind {other}"))),
    }
    Ok(())
}

fn bad(msg: &str) -> MoneError {
    MoneError::Format { offset: 0, message: format!("report schema: {msg}") }
}

fn require(
    obj: &serde_json::Map<String, serde_json::Value>,
    key: &str,
    check: impl Fn(&serde_json::Value) -> bool,
) -> Result<()> {
    match obj.get(key) {
        Some(v) if check(v) => Ok(()),
        Some(_) => Err(bad(&format!("field {key} has the wrong shape"))),
        None => Err(bad(&format!("missing field {key}"))),
    }
}
