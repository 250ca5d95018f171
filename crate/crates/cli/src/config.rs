//! Run configuration: one JSON file drives the whole pipeline.

use std::path::Path;

use serde::{Deserialize, Serialize};

use mone_core::corpus::{CorpusConfig, GeneratorKind};
use mone_core::error::{MoneError, Result};
use mone_core::model::ModelConfig;
use mone_core::pruning::ReplacementMode;
use mone_core::redundancy::{FreqNorm, ScoreMethod};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSection {
    pub n_sequences: usize,
    pub seq_len: usize,
    pub seed: u64,
    pub kind: GeneratorKind,
    /// Generator seeds standing in for distinct data sources; the ablation
    /// grid runs one corpus per entry.
    pub source_seeds: Vec<u64>,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection {
            n_sequences: 1000,
            seq_len: 128,
            seed: 1,
            kind: GeneratorKind::Markov,
            source_seeds: vec![1, 2],
        }
    }
}

impl CorpusSection {
    pub fn generator_config(&self, seed: u64) -> CorpusConfig {
        CorpusConfig { n_sequences: self.n_sequences, seq_len: self.seq_len, seed, kind: self.kind }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationSection {
    pub sample_sizes: Vec<usize>,
}

impl Default for CalibrationSection {
    fn default() -> Self {
        CalibrationSection { sample_sizes: vec![100, 500, 1000] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PruningSection {
    pub methods: Vec<ScoreMethod>,
    pub ratios: Vec<f64>,
    pub modes: Vec<ReplacementMode>,
    pub freq_norm: FreqNorm,
    pub renormalize_kept_gates: bool,
}

impl Default for PruningSection {
    fn default() -> Self {
        PruningSection {
            methods: vec![
                ScoreMethod::Mone,
                ScoreMethod::VarOnly,
                ScoreMethod::FreqOnly,
                ScoreMethod::Random { seed: 42 },
            ],
            ratios: vec![0.25, 0.5],
            modes: vec![ReplacementMode::Novice, ReplacementMode::Drop],
            freq_norm: FreqNorm::ActivationMean,
            renormalize_kept_gates: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    /// Leading slice of each source corpus used for evaluation metrics.
    pub n_sequences: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { n_sequences: 100 }
    }
}

fn default_model() -> ModelConfig {
    ModelConfig {
        vocab_size: 256,
        d_model: 64,
        n_layers: 4,
        n_experts: 16,
        top_k: 4,
        d_expert: 128,
        seed: 42,
        renormalize_gates: false,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub corpus: CorpusSection,
    pub calibration: CalibrationSection,
    pub pruning: PruningSection,
    pub eval: EvalSection,
    pub output_dir: String,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: default_model(),
            corpus: CorpusSection::default(),
            calibration: CalibrationSection::default(),
            pruning: PruningSection::default(),
            eval: EvalSection::default(),
            output_dir: "out".into(),
            seed: 42,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let cfg: RunConfig = serde_json::from_slice(&bytes)
            .map_err(|e| MoneError::Config(format!("bad run config {}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.corpus.n_sequences == 0 || self.corpus.seq_len == 0 {
            return Err(MoneError::Config("corpus must have sequences of positive length".into()));
        }
        if self.corpus.source_seeds.is_empty() {
            return Err(MoneError::Config("source_seeds must not be empty".into()));
        }
        if self.calibration.sample_sizes.is_empty() {
            return Err(MoneError::Config("sample_sizes must not be empty".into()));
        }
        for &n in &self.calibration.sample_sizes {
            if n == 0 {
                return Err(MoneError::Config("sample_sizes entries must be >= 1".into()));
            }
            if n > self.corpus.n_sequences {
                return Err(MoneError::Config(format!(
                    "sample size {n} exceeds corpus size {}",
                    self.corpus.n_sequences
                )));
            }
        }
        if self.pruning.methods.is_empty() || self.pruning.ratios.is_empty() || self.pruning.modes.is_empty()
        {
            return Err(MoneError::Config("methods, ratios and modes must not be empty".into()));
        }
        for &r in &self.pruning.ratios {
            if !(0.0..=1.0).contains(&r) {
                return Err(MoneError::Config(format!("ratio {r} outside [0, 1]")));
            }
        }
        if self.eval.n_sequences == 0 || self.eval.n_sequences > self.corpus.n_sequences {
            return Err(MoneError::Config(format!(
                "eval.n_sequences must be in 1..={}",
                self.corpus.n_sequences
            )));
        }
        Ok(())
    }

    /// Snapshot embedded in reports: the output directory is runtime
    /// plumbing and would break byte-reproducibility across workspaces.
    pub fn snapshot(&self) -> serde_json::Value {
        let mut cfg = self.clone();
        cfg.output_dir = String::new();
        serde_json::to_value(&cfg).expect("config serializes")
    }
}

/// CLI method names. `random` draws its seed from the global run seed
/// unless overridden.
pub fn parse_method(name: &str, random_seed: u64) -> Result<ScoreMethod> {
    match name {
        "mone" => Ok(ScoreMethod::Mone),
        "var-only" | "var_only" => Ok(ScoreMethod::VarOnly),
        "freq-only" | "freq_only" => Ok(ScoreMethod::FreqOnly),
        "rs" | "routing-score" => Ok(ScoreMethod::RoutingScoreRs),
        "random" => Ok(ScoreMethod::Random { seed: random_seed }),
        other => Err(MoneError::Config(format!(
            "unknown method {other}; expected mone, var-only, freq-only, rs or random"
        ))),
    }
}

pub fn parse_mode(name: &str) -> Result<ReplacementMode> {
    match name {
        "novice" => Ok(ReplacementMode::Novice),
        "drop" => Ok(ReplacementMode::Drop),
        other => Err(MoneError::Config(format!("unknown mode {other}; expected novice or drop"))),
    }
}

pub fn parse_freq_norm(name: &str) -> Result<FreqNorm> {
    match name {
        "mean" | "activation-mean" => Ok(FreqNorm::ActivationMean),
        "volume" | "token-volume" => Ok(FreqNorm::TokenVolume),
        other => Err(MoneError::Config(format!(
            "unknown freq normalization {other}; expected mean or volume"
        ))),
    }
}

pub fn parse_generator_kind(name: &str) -> Result<GeneratorKind> {
    match name {
        "markov" => Ok(GeneratorKind::Markov),
        "uniform" => Ok(GeneratorKind::Uniform),
        other => Err(MoneError::Config(format!("unknown generator {other}; expected markov or uniform"))),
    }
}
