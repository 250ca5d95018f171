//! Synthetic token corpora and their binary format.
//!
//! A corpus is a list of token sequences. The default generator walks a
//! first-order Markov chain whose transition matrix is itself seeded, so two
//! generator seeds stand in for two calibration data sources; a plain
//! uniform generator exists for degenerate baselines.
//!
//! File format: magic "MONC", u32 LE version, u32 LE sequence count, then
//! per sequence a u32 LE length followed by that many u32 LE token ids.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{MoneError, Result};
use crate::linalg::softmax;
use crate::model::TokenId;

pub const CORPUS_MAGIC: &[u8; 4] = b"MONC";
pub const CORPUS_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    /// First-order Markov chain with a seeded transition matrix.
    Markov,
    /// Independent uniform draws over the vocabulary.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub n_sequences: usize,
    pub seq_len: usize,
    pub seed: u64,
    pub kind: GeneratorKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub sequences: Vec<Vec<TokenId>>,
}

/// Generate a seeded corpus over `vocab_size` tokens.
pub fn generate_corpus(config: &CorpusConfig, vocab_size: usize) -> Result<Corpus> {
    if config.n_sequences == 0 {
        return Err(MoneError::Config("corpus must contain at least one sequence".into()));
    }
    if config.seq_len == 0 {
        return Err(MoneError::Config("sequence length must be >= 1".into()));
    }
    if vocab_size == 0 {
        return Err(MoneError::Config("vocab_size must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let sequences = match config.kind {
        GeneratorKind::Uniform => (0..config.n_sequences)
            .map(|_| {
                (0..config.seq_len).map(|_| rng.random_range(0..vocab_size) as TokenId).collect()
            })
            .collect(),
        GeneratorKind::Markov => {
            // Cumulative transition rows, one per state.
            let transitions: Vec<Vec<f64>> = (0..vocab_size)
                .map(|_| {
                    let logits: Vec<f64> =
                        (0..vocab_size).map(|_| rng.random_range(-2.0..2.0)).collect();
                    let probs = softmax(&logits);
                    let mut cum = 0.0;
                    probs
                        .into_iter()
                        .map(|p| {
                            cum += p;
                            cum
                        })
                        .collect()
                })
                .collect();
            (0..config.n_sequences)
                .map(|_| {
                    let mut seq = Vec::with_capacity(config.seq_len);
                    let mut state = rng.random_range(0..vocab_size);
                    seq.push(state as TokenId);
                    for _ in 1..config.seq_len {
                        let u: f64 = rng.random();
                        let row = &transitions[state];
                        state = row.partition_point(|&c| c < u).min(vocab_size - 1);
                        seq.push(state as TokenId);
                    }
                    seq
                })
                .collect()
        }
    };
    Ok(Corpus { sequences })
}

impl Corpus {
    pub fn to_bytes(&self) -> Vec<u8> {
        encode_sequences(&self.sequences)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[0..4] != CORPUS_MAGIC {
            return Err(MoneError::format_at(0, "bad corpus magic, expected MONC"));
        }
        if bytes.len() < 12 {
            return Err(MoneError::format_at(4, "truncated corpus header"));
        }
        let version = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]);
        if version != CORPUS_FORMAT_VERSION {
            return Err(MoneError::format_at(4, format!("unsupported corpus version {version}")));
        }
        let count = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
        let mut offset = 12usize;
        let mut sequences = Vec::with_capacity(count);
        for _ in 0..count {
            if bytes.len() < offset + 4 {
                return Err(MoneError::format_at(offset as u64, "truncated sequence length"));
            }
            let len = u32::from_le_bytes([
                bytes[offset],
                bytes[offset + 1],
                bytes[offset + 2],
                bytes[offset + 3],
            ]) as usize;
            offset += 4;
            let end = offset + len * 4;
            if bytes.len() < end {
                return Err(MoneError::format_at(offset as u64, "truncated sequence tokens"));
            }
            let seq = bytes[offset..end]
                .chunks_exact(4)
                .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            offset = end;
            sequences.push(seq);
        }
        if offset != bytes.len() {
            return Err(MoneError::format_at(offset as u64, "trailing bytes after sequences"));
        }
        Ok(Corpus { sequences })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn fingerprint(&self) -> String {
        sequences_fingerprint(&self.sequences)
    }

    pub fn total_tokens(&self) -> u64 {
        self.sequences.iter().map(|s| s.len() as u64).sum()
    }
}

fn encode_sequences(sequences: &[Vec<TokenId>]) -> Vec<u8> {
    let payload: usize = sequences.iter().map(|s| 4 + s.len() * 4).sum();
    let mut out = Vec::with_capacity(12 + payload);
    out.extend_from_slice(CORPUS_MAGIC);
    out.extend_from_slice(&CORPUS_FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(sequences.len() as u32).to_le_bytes());
    for seq in sequences {
        out.extend_from_slice(&(seq.len() as u32).to_le_bytes());
        for &t in seq {
            out.extend_from_slice(&t.to_le_bytes());
        }
    }
    out
}

/// Content hash of a sequence collection; any subset of a corpus hashes as
/// if it were a corpus of its own.
pub fn sequences_fingerprint(sequences: &[Vec<TokenId>]) -> String {
    hex::encode(Sha256::digest(encode_sequences(sequences)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn markov_cfg() -> CorpusConfig {
        CorpusConfig { n_sequences: 10, seq_len: 16, seed: 5, kind: GeneratorKind::Markov }
    }

    #[test]
    fn generation_is_byte_deterministic() {
        let a = generate_corpus(&markov_cfg(), 32).unwrap();
        let b = generate_corpus(&markov_cfg(), 32).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn shape_matches_config() {
        let cfg =
            CorpusConfig { n_sequences: 100, seq_len: 128, seed: 1, kind: GeneratorKind::Markov };
        let corpus = generate_corpus(&cfg, 64).unwrap();
        assert_eq!(corpus.sequences.len(), 100);
        assert!(corpus.sequences.iter().all(|s| s.len() == 128));
        assert!(corpus.sequences.iter().flatten().all(|&t| (t as usize) < 64));
    }

    #[test]
    fn different_source_seeds_give_different_fingerprints() {
        let mut cfg = markov_cfg();
        let a = generate_corpus(&cfg, 32).unwrap();
        cfg.seed = 6;
        let b = generate_corpus(&cfg, 32).unwrap();
        assert_ne!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn zero_sequences_is_config_error() {
        let cfg = CorpusConfig { n_sequences: 0, seq_len: 8, seed: 0, kind: GeneratorKind::Uniform };
        assert!(matches!(generate_corpus(&cfg, 8), Err(MoneError::Config(_))));
    }

    #[test]
    fn roundtrip_preserves_content() {
        let corpus = generate_corpus(&markov_cfg(), 32).unwrap();
        let back = Corpus::from_bytes(&corpus.to_bytes()).unwrap();
        assert_eq!(back, corpus);
        assert_eq!(back.fingerprint(), corpus.fingerprint());
    }

    #[test]
    fn corrupted_magic_is_rejected_at_offset_zero() {
        let mut bytes = generate_corpus(&markov_cfg(), 32).unwrap().to_bytes();
        bytes[0] = b'X';
        match Corpus::from_bytes(&bytes) {
            Err(MoneError::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncation_is_detected() {
        let bytes = generate_corpus(&markov_cfg(), 32).unwrap().to_bytes();
        let err = Corpus::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, MoneError::Format { .. }));
    }

    #[test]
    fn markov_differs_from_uniform() {
        let mut cfg = markov_cfg();
        let a = generate_corpus(&cfg, 32).unwrap();
        cfg.kind = GeneratorKind::Uniform;
        let b = generate_corpus(&cfg, 32).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn subset_fingerprint_matches_standalone_corpus() {
        let corpus = generate_corpus(&markov_cfg(), 32).unwrap();
        let subset = Corpus { sequences: corpus.sequences[..4].to_vec() };
        assert_eq!(sequences_fingerprint(&corpus.sequences[..4]), subset.fingerprint());
    }
}
