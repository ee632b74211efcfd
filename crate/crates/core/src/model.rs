//! Deterministic toy decoder-only transformer.
//!
//! Gemma-flavoured: RMS normalization with `(1 + w)` gains, rotary position
//! embedding on queries and keys, grouped-query attention, a gated GELU MLP
//! and an LM head tied to the embedding table. Everything runs in `f64`.
//!
//! Weights are never serialized. They are regenerated from `(config, seed)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{dot, HeadRows, Matrix};

pub type TokenId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub d_emb: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub vocab_size: usize,
    pub mlp_hidden: usize,
    pub max_seq: usize,
    pub norm_eps: f64,
    pub rope_theta: f64,
}

impl ModelConfig {
    /// A small configuration suitable for exhaustive tests.
    pub fn tiny() -> Self {
        Self {
            num_layers: 2,
            d_emb: 16,
            n_heads: 4,
            n_kv_heads: 2,
            head_dim: 4,
            vocab_size: 32,
            mlp_hidden: 32,
            max_seq: 64,
            norm_eps: 1e-6,
            rope_theta: 10_000.0,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let dims = [
            ("num_layers", self.num_layers),
            ("d_emb", self.d_emb),
            ("n_heads", self.n_heads),
            ("n_kv_heads", self.n_kv_heads),
            ("head_dim", self.head_dim),
            ("mlp_hidden", self.mlp_hidden),
            ("max_seq", self.max_seq),
        ];
        for (name, value) in dims {
            if value == 0 {
                return Err(ConfigError::ZeroDimension(name));
            }
        }
        if !self.n_heads.is_multiple_of(self.n_kv_heads) {
            return Err(ConfigError::HeadsNotDivisible { heads: self.n_heads, kv_heads: self.n_kv_heads });
        }
        if !self.head_dim.is_multiple_of(2) {
            return Err(ConfigError::OddHeadDim(self.head_dim));
        }
        if self.vocab_size < 2 {
            return Err(ConfigError::VocabTooSmall(self.vocab_size));
        }
        if !(self.norm_eps > 0.0) {
            return Err(ConfigError::NonPositive("norm_eps"));
        }
        if !(self.rope_theta > 0.0) {
            return Err(ConfigError::NonPositive("rope_theta"));
        }
        Ok(())
    }

    /// Query heads sharing one key/value head.
    pub fn group_size(&self) -> usize {
        self.n_heads / self.n_kv_heads
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("{0} must be at least 1")]
    ZeroDimension(&'static str),
    #[error("H not divisible by H_KV ({heads} heads, {kv_heads} key-value heads)")]
    HeadsNotDivisible { heads: usize, kv_heads: usize },
    #[error("head_dim must be even for rotary embedding, got {0}")]
    OddHeadDim(usize),
    #[error("vocabulary must hold at least 2 tokens, got {0}")]
    VocabTooSmall(usize),
    #[error("{0} must be positive")]
    NonPositive(&'static str),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(#[from] ConfigError),
    #[error("layer {layer} out of range (model has {num_layers})")]
    LayerOutOfRange { layer: usize, num_layers: usize },
    #[error("empty token sequence")]
    EmptyTokens,
    #[error("token {token} outside vocabulary of size {vocab}")]
    TokenOutOfRange { token: TokenId, vocab: usize },
    #[error("sequence length {len} exceeds max_seq {max_seq}")]
    SequenceTooLong { len: usize, max_seq: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Vec<f64>,
    /// `d_emb × (H·d)`
    pub wq: Matrix,
    /// `d_emb × (H_KV·d)`
    pub wk: Matrix,
    pub wv: Matrix,
    /// `(H·d) × d_emb`
    pub wo: Matrix,
    pub mlp_norm: Vec<f64>,
    pub w_gate: Matrix,
    pub w_up: Matrix,
    pub w_down: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    /// `V × d_emb`; doubles as the LM head.
    pub embedding: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f64>,
}

/// Query, key and value rows for a set of token positions, after rotary
/// embedding and query scaling.
#[derive(Debug, Clone, PartialEq)]
pub struct Qkv {
    pub q: HeadRows,
    pub k: HeadRows,
    pub v: HeadRows,
}

/// Hidden states after some number of decoder layers.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenMatrix {
    pub rows: Matrix,
    pub layer: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    weights: ModelWeights,
}

impl Model {
    /// Draws every weight from a ChaCha8 stream seeded with `seed`, scaled by
    /// `1/sqrt(fan_in)`. The embedding table is unit-variance.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = |rows: usize, cols: usize, scale: f64| {
            let data = (0..rows * cols)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    scale * z
                })
                .collect::<Vec<f64>>();
            Matrix::from_vec(rows, cols, data)
        };
        let c = config;
        let q_width = c.n_heads * c.head_dim;
        let kv_width = c.n_kv_heads * c.head_dim;
        let inv_sqrt = |n: usize| 1.0 / (n as f64).sqrt();

        let embedding = normal(c.vocab_size, c.d_emb, 1.0);
        let mut layers = Vec::with_capacity(c.num_layers);
        for _ in 0..c.num_layers {
            let attn_norm = normal(1, c.d_emb, 0.1).as_slice().to_vec();
            let wq = normal(c.d_emb, q_width, inv_sqrt(c.d_emb));
            let wk = normal(c.d_emb, kv_width, inv_sqrt(c.d_emb));
            let wv = normal(c.d_emb, kv_width, inv_sqrt(c.d_emb));
            let wo = normal(q_width, c.d_emb, inv_sqrt(q_width));
            let mlp_norm = normal(1, c.d_emb, 0.1).as_slice().to_vec();
            let w_gate = normal(c.d_emb, c.mlp_hidden, inv_sqrt(c.d_emb));
            let w_up = normal(c.d_emb, c.mlp_hidden, inv_sqrt(c.d_emb));
            let w_down = normal(c.mlp_hidden, c.d_emb, inv_sqrt(c.mlp_hidden));
            layers.push(LayerWeights { attn_norm, wq, wk, wv, wo, mlp_norm, w_gate, w_up, w_down });
        }
        let final_norm = normal(1, c.d_emb, 0.1).as_slice().to_vec();
        Ok(Self { config, weights: ModelWeights { embedding, layers, final_norm } })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &ModelWeights {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut ModelWeights {
        &mut self.weights
    }

    pub fn check_tokens(&self, tokens: &[TokenId]) -> Result<(), ModelError> {
        if tokens.is_empty() {
            return Err(ModelError::EmptyTokens);
        }
        if tokens.len() > self.config.max_seq {
            return Err(ModelError::SequenceTooLong { len: tokens.len(), max_seq: self.config.max_seq });
        }
        for &t in tokens {
            if t as usize >= self.config.vocab_size {
                return Err(ModelError::TokenOutOfRange { token: t, vocab: self.config.vocab_size });
            }
        }
        Ok(())
    }

    /// Embedding rows for `tokens`; ids must already be validated.
    pub fn embed(&self, tokens: &[TokenId]) -> Matrix {
        let rows: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        self.weights.embedding.select_rows(&rows)
    }

    fn layer(&self, layer: usize) -> Result<&LayerWeights, ModelError> {
        self.weights.layers.get(layer).ok_or(ModelError::LayerOutOfRange { layer, num_layers: self.config.num_layers })
    }

    /// Pre-attention norm, Q/K/V projection, rotary embedding at the given
    /// 0-based `positions`, and `1/sqrt(d)` query scaling.
    ///
    /// Each output row depends only on the matching input row and position.
    pub fn project_qkv(&self, layer: usize, hidden: &Matrix, positions: &[usize]) -> Result<Qkv, ModelError> {
        let w = self.layer(layer)?;
        let c = &self.config;
        if hidden.cols() != c.d_emb || hidden.rows() != positions.len() {
            return Err(ModelError::ShapeMismatch(format!(
                "hidden {}x{} with {} positions, expected width {}",
                hidden.rows(),
                hidden.cols(),
                positions.len(),
                c.d_emb
            )));
        }
        let normed = rms_norm(hidden, &w.attn_norm, c.norm_eps);
        let mut q = HeadRows::from_matrix(&normed.matmul(&w.wq), c.n_heads, c.head_dim);
        let mut k = HeadRows::from_matrix(&normed.matmul(&w.wk), c.n_kv_heads, c.head_dim);
        let v = HeadRows::from_matrix(&normed.matmul(&w.wv), c.n_kv_heads, c.head_dim);
        apply_rope(&mut q, positions, c.rope_theta);
        apply_rope(&mut k, positions, c.rope_theta);
        let scale = 1.0 / (c.head_dim as f64).sqrt();
        for h in 0..q.heads() {
            for r in 0..q.rows() {
                q.get_mut(h, r).iter_mut().for_each(|x| *x *= scale);
            }
        }
        Ok(Qkv { q, k, v })
    }

    /// O-projection of per-head attention outputs (`H × rows × d`).
    pub fn output_projection(&self, layer: usize, attn: &HeadRows) -> Result<Matrix, ModelError> {
        let w = self.layer(layer)?;
        if attn.heads() != self.config.n_heads || attn.dim() != self.config.head_dim {
            return Err(ModelError::ShapeMismatch(format!(
                "attention output has {} heads of dim {}",
                attn.heads(),
                attn.dim()
            )));
        }
        Ok(attn.to_matrix().matmul(&w.wo))
    }

    /// `h + o`, then `h + mlp(norm(h))`. Row-wise.
    pub fn residual_mlp(&self, layer: usize, hidden: &Matrix, attn_out: &Matrix) -> Result<Matrix, ModelError> {
        let w = self.layer(layer)?;
        let mut h = hidden.clone();
        h.add_assign(attn_out);
        let normed = rms_norm(&h, &w.mlp_norm, self.config.norm_eps);
        let gate = normed.matmul(&w.w_gate);
        let up = normed.matmul(&w.w_up);
        let mut act = Matrix::zeros(gate.rows(), gate.cols());
        for r in 0..gate.rows() {
            for (c, out) in act.row_mut(r).iter_mut().enumerate() {
                *out = gelu(gate.get(r, c)) * up.get(r, c);
            }
        }
        h.add_assign(&act.matmul(&w.w_down));
        Ok(h)
    }

    /// Final norm followed by the tied LM head.
    pub fn lm_head(&self, hidden: &Matrix) -> Matrix {
        let normed = rms_norm(hidden, &self.weights.final_norm, self.config.norm_eps);
        normed.matmul_transposed(&self.weights.embedding)
    }

    /// Hidden states after the first `num_layers` decoder layers under a
    /// causal mask. `num_layers = 0` returns the raw embedding rows.
    pub fn forward_prefix(&self, tokens: &[TokenId], num_layers: usize) -> Result<HiddenMatrix, ModelError> {
        self.check_tokens(tokens)?;
        if num_layers > self.config.num_layers {
            return Err(ModelError::LayerOutOfRange { layer: num_layers, num_layers: self.config.num_layers });
        }
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let mask = causal_mask(&positions, &positions);
        let mut h = self.embed(tokens);
        for layer in 0..num_layers {
            let qkv = self.project_qkv(layer, &h, &positions)?;
            let attn = attention_reference(&qkv.q, &qkv.k, &qkv.v, &mask)?;
            let o = self.output_projection(layer, &attn)?;
            h = self.residual_mlp(layer, &h, &o)?;
        }
        Ok(HiddenMatrix { rows: h, layer: num_layers })
    }

    /// Full vanilla pass: all layers, final norm, LM head. Returns `N × V`.
    pub fn forward_full(&self, tokens: &[TokenId]) -> Result<Matrix, ModelError> {
        let hidden = self.forward_prefix(tokens, self.config.num_layers)?;
        Ok(self.lm_head(&hidden.rows))
    }

    /// Appends `n_new` argmax tokens, recomputing the full pass each step.
    pub fn greedy_decode(&self, prompt: &[TokenId], n_new: usize) -> Result<Vec<TokenId>, ModelError> {
        self.check_tokens(prompt)?;
        let total = prompt.len() + n_new;
        if total > self.config.max_seq {
            return Err(ModelError::SequenceTooLong { len: total, max_seq: self.config.max_seq });
        }
        let mut tokens = prompt.to_vec();
        for _ in 0..n_new {
            let logits = self.forward_full(&tokens)?;
            tokens.push(argmax(logits.row(logits.rows() - 1)));
        }
        Ok(tokens)
    }
}

/// Index of the largest entry; the smallest index wins ties.
pub fn argmax(row: &[f64]) -> TokenId {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best as TokenId
}

pub fn rms_norm(x: &Matrix, weight: &[f64], eps: f64) -> Matrix {
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let mean_sq = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
        let inv = 1.0 / (mean_sq + eps).sqrt();
        for (v, w) in row.iter_mut().zip(weight) {
            *v *= inv * (1.0 + w);
        }
    }
    out
}

fn gelu(x: f64) -> f64 {
    const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044_715 * x * x * x)).tanh())
}

/// Rotate-half rotary embedding. Row `r` is rotated by angle `positions[r] * freq`.
pub fn apply_rope(x: &mut HeadRows, positions: &[usize], theta: f64) {
    let dim = x.dim();
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half).map(|i| theta.powf(-2.0 * i as f64 / dim as f64)).collect();
    for (r, &pos) in positions.iter().enumerate() {
        let angles: Vec<(f64, f64)> = freqs.iter().map(|f| (pos as f64 * f).sin_cos()).collect();
        for h in 0..x.heads() {
            let v = x.get_mut(h, r);
            for (i, &(sin, cos)) in angles.iter().enumerate() {
                let (a, b) = (v[i], v[i + half]);
                v[i] = a * cos - b * sin;
                v[i + half] = b * cos + a * sin;
            }
        }
    }
}

/// `0` where the key position is at or before the query position, `-inf` elsewhere.
pub fn causal_mask(query_positions: &[usize], key_positions: &[usize]) -> Matrix {
    let mut mask = Matrix::zeros(query_positions.len(), key_positions.len());
    for (r, &qp) in query_positions.iter().enumerate() {
        for (c, &kp) in key_positions.iter().enumerate() {
            if kp > qp {
                mask.set(r, c, f64::NEG_INFINITY);
            }
        }
    }
    mask
}

/// Per-head masked softmax attention `softmax(q kᵀ + mask) v` with the
/// `H_KV → H` broadcast. Rows whose mask is entirely `-inf` yield zeros.
pub fn attention_reference(q: &HeadRows, k: &HeadRows, v: &HeadRows, mask: &Matrix) -> Result<HeadRows, ModelError> {
    if k.heads() != v.heads() || k.rows() != v.rows() || q.dim() != k.dim() {
        return Err(ModelError::ShapeMismatch("k/v/q dimensions disagree".into()));
    }
    if k.heads() == 0 || !q.heads().is_multiple_of(k.heads()) {
        return Err(ModelError::ShapeMismatch(format!(
            "{} query heads cannot share {} key heads",
            q.heads(),
            k.heads()
        )));
    }
    if mask.rows() != q.rows() || mask.cols() != k.rows() {
        return Err(ModelError::ShapeMismatch(format!(
            "mask {}x{} for {} queries and {} keys",
            mask.rows(),
            mask.cols(),
            q.rows(),
            k.rows()
        )));
    }
    let group = q.heads() / k.heads();
    let mut out = HeadRows::zeros(q.heads(), q.rows(), v.dim());
    let mut logits = vec![0.0; k.rows()];
    for h in 0..q.heads() {
        let kv = h / group;
        for r in 0..q.rows() {
            let qr = q.get(h, r);
            for (c, l) in logits.iter_mut().enumerate() {
                *l = dot(qr, k.get(kv, c)) + mask.get(r, c);
            }
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut sum = 0.0;
            for l in logits.iter_mut() {
                *l = (*l - max).exp();
                sum += *l;
            }
            let o = out.get_mut(h, r);
            for (c, &p) in logits.iter().enumerate() {
                let w = p / sum;
                for (oi, vi) in o.iter_mut().zip(v.get(kv, c)) {
                    *oi += w * vi;
                }
            }
        }
    }
    Ok(out)
}
