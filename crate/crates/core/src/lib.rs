//! Mixture-of-Novices-and-Experts (MoNE): expert pruning for MoE language
//! models at desk scale.
//!
//! The pipeline: build a seeded toy MoE decoder ([`model`]), stream a
//! calibration corpus through it collecting per-expert statistics
//! ([`calibration`]), score expert redundancy and pick prune sets
//! ([`redundancy`]), replace pruned experts with constant novice vectors
//! ([`pruning`]), then quantify output discrepancy, perplexity change and
//! compute/memory savings ([`eval`], [`report`]).

pub mod calibration;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod exec;
pub mod linalg;
pub mod model;
pub mod pruning;
pub mod redundancy;
pub mod report;

pub use error::{MoneError, Result};
pub use exec::ExecMode;
