//! Toy MoE decoder language model.
//!
//! Deterministic fixture for the pruning pipeline: a pre-norm causal
//! transformer whose feed-forward blocks are mixture-of-experts layers
//! (softmax router, top-k selection, SiLU two-matrix experts). Built from a
//! seed, immutable afterwards; forward passes over distinct sequences may run
//! concurrently with shared read-only access.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MoneError, Result};
use crate::linalg::{all_finite, silu, softmax, Matrix, RmsNorm};

pub type TokenId = u32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    /// Hidden size d.
    pub d_model: usize,
    pub n_layers: usize,
    /// Experts per MoE layer, M.
    pub n_experts: usize,
    /// Experts activated per token, k.
    pub top_k: usize,
    /// Expert hidden width.
    pub d_expert: usize,
    pub seed: u64,
    /// Rescale the selected top-k gates to sum to 1.
    #[serde(default)]
    pub renormalize_gates: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k > self.n_experts {
            return Err(MoneError::Config(format!(
                "top_k ({}) exceeds n_experts ({})",
                self.top_k, self.n_experts
            )));
        }
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_experts", self.n_experts),
            ("top_k", self.top_k),
            ("d_expert", self.d_expert),
        ] {
            if v == 0 {
                return Err(MoneError::Config(format!("{name} must be >= 1")));
            }
        }
        Ok(())
    }
}

/// Two-matrix SiLU MLP: y = silu(x W_up) W_down.
#[derive(Debug, Clone, PartialEq)]
pub struct Expert {
    /// d_model x d_expert.
    pub w_up: Matrix,
    /// d_expert x d_model.
    pub w_down: Matrix,
}

impl Expert {
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut h = self.w_up.vec_mat(x);
        for v in h.iter_mut() {
            *v = silu(*v);
        }
        self.w_down.vec_mat(&h)
    }

    pub fn param_count(&self) -> u64 {
        (self.w_up.len() + self.w_down.len()) as u64
    }
}

/// Softmax router over all M experts.
#[derive(Debug, Clone, PartialEq)]
pub struct Router {
    /// d_model x n_experts.
    pub w_gate: Matrix,
}

impl Router {
    /// Full softmax scores plus the top-k (index, gate) pairs.
    ///
    /// Selection order is descending score, ties broken by ascending expert
    /// index. With `renormalize` the selected gates are rescaled to sum to 1.
    #[allow(clippy::type_complexity)]
    pub fn route(&self, x: &[f64], k: usize, renormalize: bool) -> Result<(Vec<f64>, Vec<(usize, f64)>)> {
        if x.len() != self.w_gate.rows {
            return Err(MoneError::Shape(format!(
                "router expects input of dim {}, got {}",
                self.w_gate.rows,
                x.len()
            )));
        }
        if !all_finite(x) {
            return Err(MoneError::NumericInput("router input contains non-finite values".into()));
        }
        let scores = softmax(&self.w_gate.vec_mat(x));
        let m = scores.len();
        debug_assert!(k <= m);
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| {
            scores[b].partial_cmp(&scores[a]).expect("softmax output is finite").then(a.cmp(&b))
        });
        let mut selected: Vec<(usize, f64)> = order[..k].iter().map(|&i| (i, scores[i])).collect();
        if renormalize {
            let sum: f64 = selected.iter().map(|(_, g)| g).sum();
            if sum > 0.0 {
                for (_, g) in selected.iter_mut() {
                    *g /= sum;
                }
            }
        }
        Ok((scores, selected))
    }
}

/// One expert's contribution for a routed token, with the raw (pre-gate)
/// output kept for calibration.
#[derive(Debug, Clone)]
pub struct SelectedExpert {
    pub index: usize,
    pub gate: f64,
    pub output: Vec<f64>,
}

/// Router plus the full expert set.
#[derive(Debug, Clone)]
pub struct MoELayer {
    pub router: Router,
    pub experts: Vec<Expert>,
}

impl MoELayer {
    /// Weighted sum over the top-k experts: y = sum gate_i * E_i(x).
    pub fn forward(&self, x: &[f64], top_k: usize, renormalize: bool) -> Result<Vec<f64>> {
        self.forward_traced(x, top_k, renormalize).map(|(y, _)| y)
    }

    pub fn forward_traced(
        &self,
        x: &[f64],
        top_k: usize,
        renormalize: bool,
    ) -> Result<(Vec<f64>, Vec<SelectedExpert>)> {
        let (_, selected) = self.router.route(x, top_k, renormalize)?;
        let mut y = vec![0.0f64; x.len()];
        let mut records = Vec::with_capacity(selected.len());
        for (index, gate) in selected {
            let output = self.experts[index].forward(x);
            for (acc, &o) in y.iter_mut().zip(&output) {
                *acc += gate * o;
            }
            records.push(SelectedExpert { index, gate, output });
        }
        Ok((y, records))
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }
}

/// Feed-forward slot of a transformer block. Implemented by the dense MoE
/// layer and by its pruned counterpart.
pub trait FfnLayer {
    /// Per-token routing record exposed when tracing.
    type TokenTrace;

    fn forward(&self, x: &[f64], top_k: usize, renormalize: bool) -> Result<Vec<f64>>;
    fn forward_traced(
        &self,
        x: &[f64],
        top_k: usize,
        renormalize: bool,
    ) -> Result<(Vec<f64>, Self::TokenTrace)>;
}

impl FfnLayer for MoELayer {
    type TokenTrace = Vec<SelectedExpert>;

    fn forward(&self, x: &[f64], top_k: usize, renormalize: bool) -> Result<Vec<f64>> {
        MoELayer::forward(self, x, top_k, renormalize)
    }

    fn forward_traced(
        &self,
        x: &[f64],
        top_k: usize,
        renormalize: bool,
    ) -> Result<(Vec<f64>, Self::TokenTrace)> {
        MoELayer::forward_traced(self, x, top_k, renormalize)
    }
}

/// Single-head causal self-attention.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
}

impl Attention {
    /// Causal attention over a whole sequence of (already normed) inputs.
    /// Position t attends to positions <= t only.
    #[allow(clippy::needless_range_loop)]
    pub fn forward(&self, xs: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let d = self.wq.rows;
        let scale = 1.0 / (d as f64).sqrt();
        let qs: Vec<Vec<f64>> = xs.iter().map(|x| self.wq.vec_mat(x)).collect();
        let ks: Vec<Vec<f64>> = xs.iter().map(|x| self.wk.vec_mat(x)).collect();
        let vs: Vec<Vec<f64>> = xs.iter().map(|x| self.wv.vec_mat(x)).collect();
        let mut out = Vec::with_capacity(xs.len());
        for t in 0..xs.len() {
            let logits: Vec<f64> = (0..=t)
                .map(|s| qs[t].iter().zip(&ks[s]).map(|(a, b)| a * b).sum::<f64>() * scale)
                .collect();
            let weights = softmax(&logits);
            let mut ctx = vec![0.0f64; d];
            for (s, &w) in weights.iter().enumerate() {
                for (c, &v) in ctx.iter_mut().zip(&vs[s]) {
                    *c += w * v;
                }
            }
            out.push(self.wo.vec_mat(&ctx));
        }
        out
    }
}

/// Pre-norm transformer block: attention and feed-forward, each with a
/// residual connection.
#[derive(Debug, Clone)]
pub struct Block<F> {
    pub attn_norm: RmsNorm,
    pub attn: Attention,
    pub ffn_norm: RmsNorm,
    pub moe: F,
}

/// FFN input and routing record for one (layer, position).
#[derive(Debug, Clone)]
pub struct TracedToken<T> {
    /// Hidden state fed to the MoE layer (post ffn-norm).
    pub ffn_input: Vec<f64>,
    pub ffn: T,
}

/// Per-layer, per-position MoE traces for one sequence.
pub struct ModelTrace<T> {
    /// Indexed `layers[layer][position]`.
    pub layers: Vec<Vec<TracedToken<T>>>,
}

/// Decoder LM: token embedding, transformer blocks, final norm, untied head.
#[derive(Debug, Clone)]
pub struct TransformerModel<F> {
    pub config: ModelConfig,
    /// vocab_size x d_model.
    pub token_embedding: Matrix,
    pub blocks: Vec<Block<F>>,
    pub final_norm: RmsNorm,
    /// d_model x vocab_size.
    pub lm_head: Matrix,
}

pub type MoEModel = TransformerModel<MoELayer>;

impl<F: FfnLayer> TransformerModel<F> {
    /// Logits for every position, shape T x vocab.
    pub fn forward(&self, tokens: &[TokenId]) -> Result<Vec<Vec<f64>>> {
        self.forward_impl(tokens, false).map(|(logits, _)| logits)
    }

    /// Same computation as [`forward`](Self::forward) plus per-layer,
    /// per-position MoE inputs and routing records.
    #[allow(clippy::type_complexity)]
    pub fn forward_traced(&self, tokens: &[TokenId]) -> Result<(Vec<Vec<f64>>, ModelTrace<F::TokenTrace>)> {
        self.forward_impl(tokens, true)
            .map(|(logits, trace)| (logits, trace.expect("trace requested")))
    }

    #[allow(clippy::type_complexity)]
    fn forward_impl(
        &self,
        tokens: &[TokenId],
        collect_trace: bool,
    ) -> Result<(Vec<Vec<f64>>, Option<ModelTrace<F::TokenTrace>>)> {
        if tokens.is_empty() {
            return Err(MoneError::Input("empty token sequence".into()));
        }
        for &t in tokens {
            if t as usize >= self.config.vocab_size {
                return Err(MoneError::Input(format!(
                    "token id {t} out of range for vocab_size {}",
                    self.config.vocab_size
                )));
            }
        }
        let k = self.config.top_k;
        let renorm = self.config.renormalize_gates;
        let mut xs: Vec<Vec<f64>> =
            tokens.iter().map(|&t| self.token_embedding.row(t as usize).to_vec()).collect();
        let mut trace = collect_trace.then(|| ModelTrace { layers: Vec::with_capacity(self.blocks.len()) });

        for block in &self.blocks {
            let normed: Vec<Vec<f64>> = xs.iter().map(|x| block.attn_norm.apply(x)).collect();
            let attn_out = block.attn.forward(&normed);
            for (x, a) in xs.iter_mut().zip(&attn_out) {
                for (xv, &av) in x.iter_mut().zip(a) {
                    *xv += av;
                }
            }
            let mut layer_trace = collect_trace.then(|| Vec::with_capacity(xs.len()));
            for x in xs.iter_mut() {
                let ffn_input = block.ffn_norm.apply(x);
                let y = if let Some(records) = layer_trace.as_mut() {
                    let (y, rec) = block.moe.forward_traced(&ffn_input, k, renorm)?;
                    records.push(TracedToken { ffn_input, ffn: rec });
                    y
                } else {
                    block.moe.forward(&ffn_input, k, renorm)?
                };
                for (xv, &yv) in x.iter_mut().zip(&y) {
                    *xv += yv;
                }
            }
            if let (Some(t), Some(lt)) = (trace.as_mut(), layer_trace) {
                t.layers.push(lt);
            }
        }

        let logits = xs
            .iter()
            .map(|x| self.lm_head.vec_mat(&self.final_norm.apply(x)))
            .collect();
        Ok((logits, trace))
    }
}

/// Build a model with every matrix drawn from a seeded uniform distribution
/// on [-1/sqrt(fan_in), +1/sqrt(fan_in)]. Identical config (including seed)
/// gives bit-identical parameters.
pub fn init_model(config: &ModelConfig) -> Result<MoEModel> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d = config.d_model;
    let de = config.d_expert;
    let vocab = config.vocab_size;

    let uniform = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
        Matrix::seeded_uniform(rows, cols, 1.0 / (rows as f64).sqrt(), rng)
    };

    // Draw order matches the checkpoint tensor manifest.
    let token_embedding = uniform(vocab, d, &mut rng);
    let mut blocks = Vec::with_capacity(config.n_layers);
    for _ in 0..config.n_layers {
        let attn = Attention {
            wq: uniform(d, d, &mut rng),
            wk: uniform(d, d, &mut rng),
            wv: uniform(d, d, &mut rng),
            wo: uniform(d, d, &mut rng),
        };
        let router = Router { w_gate: uniform(d, config.n_experts, &mut rng) };
        let experts = (0..config.n_experts)
            .map(|_| Expert { w_up: uniform(d, de, &mut rng), w_down: uniform(de, d, &mut rng) })
            .collect();
        blocks.push(Block {
            attn_norm: RmsNorm::ones(d),
            attn,
            ffn_norm: RmsNorm::ones(d),
            moe: MoELayer { router, experts },
        });
    }
    let final_norm = RmsNorm::ones(d);
    let lm_head = uniform(d, vocab, &mut rng);
    Ok(TransformerModel { config: config.clone(), token_embedding, blocks, final_norm, lm_head })
}

/// Exact parameter totals for a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParamCounts {
    pub total: u64,
    /// Expert matrices only (router excluded).
    pub expert: u64,
    /// Novice vector entries (zero for dense models).
    pub novice: u64,
    /// Everything else: embeddings, attention, norms, routers, head.
    pub other: u64,
}

impl MoEModel {
    pub fn param_counts(&self) -> ParamCounts {
        let mut expert = 0u64;
        let mut other = self.token_embedding.len() as u64 + self.lm_head.len() as u64;
        other += self.final_norm.weight.len() as u64;
        for b in &self.blocks {
            other += (b.attn_norm.weight.len() + b.ffn_norm.weight.len()) as u64;
            other += (b.attn.wq.len() + b.attn.wk.len() + b.attn.wv.len() + b.attn.wo.len()) as u64;
            other += b.moe.router.w_gate.len() as u64;
            for e in &b.moe.experts {
                expert += e.param_count();
            }
        }
        ParamCounts { total: expert + other, expert, novice: 0, other }
    }
}
