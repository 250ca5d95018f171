//! Dense row-major matrices and the handful of vector ops the model needs.
//!
//! Parameters are serialized as little-endian f32 but held as f64 in memory;
//! every stored value is an exact f32 image, so save/load roundtrips are
//! bit-identical while all arithmetic runs in 64-bit.

use rand::Rng;

use crate::error::{MoneError, Result};

/// Row-major matrix. `data[r * cols + c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    /// Draw every entry from a uniform distribution on [-bound, bound],
    /// quantized to f32 so the in-memory value matches its serialized form.
    pub fn seeded_uniform(rows: usize, cols: usize, bound: f64, rng: &mut impl Rng) -> Self {
        let data = (0..rows * cols)
            .map(|_| {
                let v: f64 = rng.random_range(-bound..=bound);
                v as f32 as f64
            })
            .collect();
        Matrix { rows, cols, data }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |v| v.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend(row);
        }
        Matrix { rows: r, cols: c, data }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Left multiply by a row vector: y = x * M, with x of length `rows`.
    ///
    /// Iterates rows so the inner loop walks contiguous memory.
    pub fn vec_mat(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.rows);
        let mut y = vec![0.0f64; self.cols];
        for (r, &xv) in x.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let row = self.row(r);
            for (yv, &w) in y.iter_mut().zip(row) {
                *yv += xv * w;
            }
        }
        y
    }

    /// Serialize entries as little-endian f32, row-major.
    pub fn to_f32_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * 4);
        for &v in &self.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    /// Parse little-endian f32 entries into an f64-backed matrix.
    pub fn from_f32_le_bytes(rows: usize, cols: usize, bytes: &[u8]) -> Result<Self> {
        let want = rows * cols * 4;
        if bytes.len() != want {
            return Err(MoneError::Shape(format!(
                "tensor byte length {} does not match {}x{} f32 ({want})",
                bytes.len(),
                rows,
                cols
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        Ok(Matrix { rows, cols, data })
    }
}

/// x / sqrt(mean(x^2) + eps), scaled by a learned per-coordinate gain.
#[derive(Debug, Clone, PartialEq)]
pub struct RmsNorm {
    pub weight: Vec<f64>,
    pub eps: f64,
}

impl RmsNorm {
    pub fn ones(dim: usize) -> Self {
        RmsNorm { weight: vec![1.0; dim], eps: 1e-6 }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.weight.len());
        let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
        let inv = 1.0 / (ms + self.eps).sqrt();
        x.iter().zip(&self.weight).map(|(v, w)| v * inv * w).collect()
    }
}

/// Numerically stable softmax over the full slice.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub fn l2_norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn l2_dist(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub fn all_finite(x: &[f64]) -> bool {
    x.iter().all(|v| v.is_finite())
}
