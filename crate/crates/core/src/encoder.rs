//! Bidirectional transformer encoder over summed word, segment and position
//! embeddings, with hand-derived backward passes.
//!
//! Each block is post-norm: `h = LN(x + Attn(x))`, `out = LN(h + FFN(h))`,
//! where attention is multi-head scaled dot-product with PAD keys masked out
//! and the feed-forward uses the tanh form of GELU.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{dot, Matrix};
use crate::tokenizer::TokenSequence;

/// Added to attention scores of PAD keys before the softmax. Large enough that
/// `exp` underflows to exactly zero.
pub const MASK_PENALTY: f64 = -1e9;

/// Layer-norm variance floor.
pub const LAYER_NORM_EPS: f64 = 1e-12;

/// Number of segment embedding rows.
pub const SEGMENT_ROWS: usize = 2;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("{what} index {index} out of bounds for table with {len} rows")]
    IndexOutOfBounds {
        what: &'static str,
        index: usize,
        len: usize,
    },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite activation in layer {layer}")]
    NonFiniteActivation { layer: usize },
    #[error("backward called without a forward cache")]
    MissingCache,
    #[error("invalid encoder config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Final-layer row 0.
    #[default]
    Cls,
    /// Mean over unmasked rows of the final layer.
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_positions: usize,
    /// Inverted dropout on both sublayer outputs; applied only in training.
    pub dropout_rate: f64,
    pub pooling: Pooling,
    pub seed: u64,
}

impl EncoderConfig {
    pub fn new(vocab_size: usize, max_positions: usize) -> Self {
        Self {
            vocab_size,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_ff: 256,
            max_positions,
            dropout_rate: 0.0,
            pooling: Pooling::Cls,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_positions", self.max_positions),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(EncoderError::InvalidConfig(format!("{name} must be >= 1")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(EncoderError::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(EncoderError::InvalidConfig(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

/// Named view over a set of trainable tensors, in a fixed order.
pub trait Parameters {
    fn tensors(&self) -> Vec<(String, &[f64])>;
    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])>;

    fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    /// `d_in x d_out`; forward is `x W + b`.
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Linear {
    fn init(d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        Self {
            weight: Matrix::xavier(d_in, d_out, rng),
            bias: vec![0.0; d_out],
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            weight: Matrix::zeros(self.weight.rows(), self.weight.cols()),
            bias: vec![0.0; self.bias.len()],
        }
    }

    pub fn forward(&self, x: &Matrix) -> Matrix {
        let mut y = x.matmul(&self.weight);
        y.add_row_vector(&self.bias);
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    fn backward(&self, x: &Matrix, dy: &Matrix, grad: &mut Linear) -> Matrix {
        grad.weight.add_assign(&x.t_matmul(dy));
        for (g, s) in grad.bias.iter_mut().zip(dy.column_sums()) {
            *g += s;
        }
        dy.matmul_t(&self.weight)
    }

    fn push_tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [f64])>) {
        out.push((format!("{prefix}.weight"), self.weight.data()));
        out.push((format!("{prefix}.bias"), &self.bias));
    }

    fn push_tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut [f64])>) {
        out.push((format!("{prefix}.weight"), self.weight.data_mut()));
        out.push((format!("{prefix}.bias"), &mut self.bias));
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    /// Normalized input before gain and bias.
    pub xhat: Matrix,
    pub inv_std: Vec<f64>,
}

impl LayerNorm {
    pub fn new(d: usize) -> Self {
        Self {
            gain: vec![1.0; d],
            bias: vec![0.0; d],
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            gain: vec![0.0; self.gain.len()],
            bias: vec![0.0; self.bias.len()],
        }
    }

    pub fn forward(&self, x: &Matrix) -> (Matrix, LayerNormCache) {
        let (n, d) = x.shape();
        let mut xhat = Matrix::zeros(n, d);
        let mut out = Matrix::zeros(n, d);
        let mut inv_std = Vec::with_capacity(n);
        for r in 0..n {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for (c, &x) in row.iter().enumerate() {
                let h = (x - mean) * is;
                xhat.set(r, c, h);
                out.set(r, c, self.gain[c] * h + self.bias[c]);
            }
        }
        (out, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&self, dy: &Matrix, cache: &LayerNormCache, grad: &mut LayerNorm) -> Matrix {
        let (n, d) = dy.shape();
        let mut dx = Matrix::zeros(n, d);
        let mut dxhat = vec![0.0; d];
        for r in 0..n {
            let dy_row = dy.row(r);
            let xh = cache.xhat.row(r);
            for c in 0..d {
                dxhat[c] = dy_row[c] * self.gain[c];
                grad.gain[c] += dy_row[c] * xh[c];
                grad.bias[c] += dy_row[c];
            }
            let sum_dxhat: f64 = dxhat.iter().sum();
            let sum_dxhat_xhat = dot(&dxhat, xh);
            let scale = cache.inv_std[r] / d as f64;
            let out = dx.row_mut(r);
            for c in 0..d {
                out[c] = scale * (d as f64 * dxhat[c] - sum_dxhat - xh[c] * sum_dxhat_xhat);
            }
        }
        dx
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderLayer {
    pub attn_q: Linear,
    pub attn_k: Linear,
    pub attn_v: Linear,
    pub attn_out: Linear,
    pub norm_attn: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
    pub norm_ff: LayerNorm,
}

impl EncoderLayer {
    fn init(d_model: usize, d_ff: usize, rng: &mut impl Rng) -> Self {
        Self {
            attn_q: Linear::init(d_model, d_model, rng),
            attn_k: Linear::init(d_model, d_model, rng),
            attn_v: Linear::init(d_model, d_model, rng),
            attn_out: Linear::init(d_model, d_model, rng),
            norm_attn: LayerNorm::new(d_model),
            ff_in: Linear::init(d_model, d_ff, rng),
            ff_out: Linear::init(d_ff, d_model, rng),
            norm_ff: LayerNorm::new(d_model),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            attn_q: self.attn_q.zeros_like(),
            attn_k: self.attn_k.zeros_like(),
            attn_v: self.attn_v.zeros_like(),
            attn_out: self.attn_out.zeros_like(),
            norm_attn: self.norm_attn.zeros_like(),
            ff_in: self.ff_in.zeros_like(),
            ff_out: self.ff_out.zeros_like(),
            norm_ff: self.norm_ff.zeros_like(),
        }
    }

    fn push_tensors<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [f64])>) {
        self.attn_q.push_tensors(&format!("{prefix}.attn_q"), out);
        self.attn_k.push_tensors(&format!("{prefix}.attn_k"), out);
        self.attn_v.push_tensors(&format!("{prefix}.attn_v"), out);
        self.attn_out.push_tensors(&format!("{prefix}.attn_out"), out);
        out.push((format!("{prefix}.norm_attn.gain"), &self.norm_attn.gain));
        out.push((format!("{prefix}.norm_attn.bias"), &self.norm_attn.bias));
        self.ff_in.push_tensors(&format!("{prefix}.ff_in"), out);
        self.ff_out.push_tensors(&format!("{prefix}.ff_out"), out);
        out.push((format!("{prefix}.norm_ff.gain"), &self.norm_ff.gain));
        out.push((format!("{prefix}.norm_ff.bias"), &self.norm_ff.bias));
    }

    fn push_tensors_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut [f64])>) {
        self.attn_q.push_tensors_mut(&format!("{prefix}.attn_q"), out);
        self.attn_k.push_tensors_mut(&format!("{prefix}.attn_k"), out);
        self.attn_v.push_tensors_mut(&format!("{prefix}.attn_v"), out);
        self.attn_out.push_tensors_mut(&format!("{prefix}.attn_out"), out);
        out.push((format!("{prefix}.norm_attn.gain"), &mut self.norm_attn.gain));
        out.push((format!("{prefix}.norm_attn.bias"), &mut self.norm_attn.bias));
        self.ff_in.push_tensors_mut(&format!("{prefix}.ff_in"), out);
        self.ff_out.push_tensors_mut(&format!("{prefix}.ff_out"), out);
        out.push((format!("{prefix}.norm_ff.gain"), &mut self.norm_ff.gain));
        out.push((format!("{prefix}.norm_ff.bias"), &mut self.norm_ff.bias));
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub n_heads: usize,
    pub layers: Vec<EncoderLayer>,
}

impl EncoderParams {
    pub fn zeros_like(&self) -> Self {
        Self {
            n_heads: self.n_heads,
            layers: self.layers.iter().map(EncoderLayer::zeros_like).collect(),
        }
    }

    pub fn d_model(&self) -> usize {
        self.layers.first().map_or(0, |l| l.attn_q.weight.rows())
    }
}

impl Parameters for EncoderParams {
    fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            layer.push_tensors(&format!("layer{i}"), &mut out);
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.push_tensors_mut(&format!("layer{i}"), &mut out);
        }
        out
    }
}

/// Word, segment and position lookup tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTables {
    pub word: Matrix,
    pub segment: Matrix,
    pub position: Matrix,
}

impl EmbeddingTables {
    pub fn zeros(vocab_size: usize, max_positions: usize, d_model: usize) -> Self {
        Self {
            word: Matrix::zeros(vocab_size, d_model),
            segment: Matrix::zeros(SEGMENT_ROWS, d_model),
            position: Matrix::zeros(max_positions, d_model),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.word.rows(), self.position.rows(), self.word.cols())
    }

    pub fn d_model(&self) -> usize {
        self.word.cols()
    }
}

impl Parameters for EmbeddingTables {
    fn tensors(&self) -> Vec<(String, &[f64])> {
        vec![
            ("embed.word".into(), self.word.data()),
            ("embed.segment".into(), self.segment.data()),
            ("embed.position".into(), self.position.data()),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        vec![
            ("embed.word".into(), self.word.data_mut()),
            ("embed.segment".into(), self.segment.data_mut()),
            ("embed.position".into(), self.position.data_mut()),
        ]
    }
}

/// Row `t` is `word[token_t] + segment[segment_t] + position[position_t]`.
pub fn embed(seq: &TokenSequence, tables: &EmbeddingTables) -> Result<Matrix, EncoderError> {
    let n = seq.token_ids.len();
    if seq.segment_ids.len() != n || seq.position_ids.len() != n || seq.pad_mask.len() != n {
        return Err(EncoderError::ShapeMismatch(
            "token, segment, position and mask lengths differ".into(),
        ));
    }
    let d = tables.d_model();
    let mut out = Matrix::zeros(n, d);
    for t in 0..n {
        let w = lookup(&tables.word, seq.token_ids[t], "token")?;
        let s = lookup(&tables.segment, seq.segment_ids[t], "segment")?;
        let p = lookup(&tables.position, seq.position_ids[t], "position")?;
        for (c, o) in out.row_mut(t).iter_mut().enumerate() {
            *o = w[c] + s[c] + p[c];
        }
    }
    Ok(out)
}

fn lookup<'a>(table: &'a Matrix, id: u32, what: &'static str) -> Result<&'a [f64], EncoderError> {
    let index = id as usize;
    if index >= table.rows() {
        return Err(EncoderError::IndexOutOfBounds {
            what,
            index,
            len: table.rows(),
        });
    }
    Ok(table.row(index))
}

/// Scatters `d_embedded` back into the three tables.
pub fn embed_backward(d_embedded: &Matrix, seq: &TokenSequence, grad: &mut EmbeddingTables) {
    for t in 0..d_embedded.rows() {
        let g = d_embedded.row(t);
        for (dst, id) in [
            (&mut grad.word, seq.token_ids[t]),
            (&mut grad.segment, seq.segment_ids[t]),
            (&mut grad.position, seq.position_ids[t]),
        ] {
            for (a, b) in dst.row_mut(id as usize).iter_mut().zip(g) {
                *a += b;
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Per-layer outputs; the last entry is the final representation.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStates {
    pub layers: Vec<Matrix>,
}

impl HiddenStates {
    pub fn last(&self) -> &Matrix {
        self.layers.last().expect("encoder has at least one layer")
    }

    pub fn cls_vector(&self) -> &[f64] {
        self.last().row(0)
    }
}

/// Inverted-dropout source used during training.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut dyn RngCore,
}

impl Dropout<'_> {
    fn mask(&mut self, len: usize) -> Vec<f64> {
        let keep = 1.0 / (1.0 - self.rate);
        (0..len)
            .map(|_| {
                if self.rng.random::<f64>() < self.rate {
                    0.0
                } else {
                    keep
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct LayerCache {
    input: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    /// Attention probabilities per head, `n x n`.
    pub probs: Vec<Matrix>,
    context: Matrix,
    attn_drop: Option<Vec<f64>>,
    norm_attn: LayerNormCache,
    hidden: Matrix,
    ff_pre: Matrix,
    ff_act: Matrix,
    ff_drop: Option<Vec<f64>>,
    norm_ff: LayerNormCache,
}

impl LayerCache {
    pub fn norm_attn(&self) -> &LayerNormCache {
        &self.norm_attn
    }

    pub fn norm_ff(&self) -> &LayerNormCache {
        &self.norm_ff
    }
}

/// Activations retained by a training forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub pad_mask: Vec<bool>,
    pub layers: Vec<LayerCache>,
}

fn head_slice(m: &Matrix, head: usize, width: usize) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), width);
    for r in 0..m.rows() {
        out.row_mut(r)
            .copy_from_slice(&m.row(r)[head * width..(head + 1) * width]);
    }
    out
}

fn write_head(dst: &mut Matrix, src: &Matrix, head: usize, width: usize) {
    for r in 0..src.rows() {
        dst.row_mut(r)[head * width..(head + 1) * width].copy_from_slice(src.row(r));
    }
}

fn apply_mask(m: &mut Matrix, mask: &[f64]) {
    for (v, k) in m.data_mut().iter_mut().zip(mask) {
        *v *= k;
    }
}

fn layer_forward(
    layer: &EncoderLayer,
    x: &Matrix,
    pad_mask: &[bool],
    n_heads: usize,
    mut dropout: Option<&mut Dropout<'_>>,
) -> (Matrix, LayerCache) {
    let (n, d) = x.shape();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let q = layer.attn_q.forward(x);
    let k = layer.attn_k.forward(x);
    let v = layer.attn_v.forward(x);

    let mut context = Matrix::zeros(n, d);
    let mut probs = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = head_slice(&q, h, dh);
        let kh = head_slice(&k, h, dh);
        let vh = head_slice(&v, h, dh);
        let mut scores = qh.matmul_t(&kh);
        for i in 0..n {
            let row = scores.row_mut(i);
            for (j, s) in row.iter_mut().enumerate() {
                *s *= scale;
                if !pad_mask[j] {
                    *s += MASK_PENALTY;
                }
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for s in row.iter_mut() {
                *s = (*s - max).exp();
                sum += *s;
            }
            for s in row.iter_mut() {
                *s /= sum;
            }
        }
        write_head(&mut context, &scores.matmul(&vh), h, dh);
        probs.push(scores);
    }

    let mut attn = layer.attn_out.forward(&context);
    let attn_drop = dropout.as_deref_mut().map(|dr| {
        let m = dr.mask(attn.data().len());
        apply_mask(&mut attn, &m);
        m
    });
    let mut resid = x.clone();
    resid.add_assign(&attn);
    let (hidden, norm_attn) = layer.norm_attn.forward(&resid);

    let ff_pre = layer.ff_in.forward(&hidden);
    let ff_act = ff_pre.map(gelu);
    let mut ff = layer.ff_out.forward(&ff_act);
    let ff_drop = dropout.map(|dr| {
        let m = dr.mask(ff.data().len());
        apply_mask(&mut ff, &m);
        m
    });
    let mut resid2 = hidden.clone();
    resid2.add_assign(&ff);
    let (out, norm_ff) = layer.norm_ff.forward(&resid2);

    let cache = LayerCache {
        input: x.clone(),
        q,
        k,
        v,
        probs,
        context,
        attn_drop,
        norm_attn,
        hidden,
        ff_pre,
        ff_act,
        ff_drop,
        norm_ff,
    };
    (out, cache)
}

fn layer_backward(
    layer: &EncoderLayer,
    cache: &LayerCache,
    d_out: &Matrix,
    n_heads: usize,
    grad: &mut EncoderLayer,
) -> Matrix {
    let (n, d) = d_out.shape();
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let d_resid2 = layer.norm_ff.backward(d_out, &cache.norm_ff, &mut grad.norm_ff);
    let mut d_ff = d_resid2.clone();
    if let Some(m) = &cache.ff_drop {
        apply_mask(&mut d_ff, m);
    }
    let d_act = layer.ff_out.backward(&cache.ff_act, &d_ff, &mut grad.ff_out);
    let mut d_pre = d_act;
    for (g, &x) in d_pre.data_mut().iter_mut().zip(cache.ff_pre.data()) {
        *g *= gelu_grad(x);
    }
    let mut d_hidden = d_resid2;
    d_hidden.add_assign(&layer.ff_in.backward(&cache.hidden, &d_pre, &mut grad.ff_in));

    let d_resid = layer
        .norm_attn
        .backward(&d_hidden, &cache.norm_attn, &mut grad.norm_attn);
    let mut d_attn = d_resid.clone();
    if let Some(m) = &cache.attn_drop {
        apply_mask(&mut d_attn, m);
    }
    let d_context = layer
        .attn_out
        .backward(&cache.context, &d_attn, &mut grad.attn_out);

    let mut dq = Matrix::zeros(n, d);
    let mut dk = Matrix::zeros(n, d);
    let mut dv = Matrix::zeros(n, d);
    for h in 0..n_heads {
        let p = &cache.probs[h];
        let qh = head_slice(&cache.q, h, dh);
        let kh = head_slice(&cache.k, h, dh);
        let vh = head_slice(&cache.v, h, dh);
        let dch = head_slice(&d_context, h, dh);

        let dp = dch.matmul_t(&vh);
        write_head(&mut dv, &p.t_matmul(&dch), h, dh);
        let mut ds = Matrix::zeros(n, n);
        for i in 0..n {
            let p_row = p.row(i);
            let dp_row = dp.row(i);
            let inner = dot(p_row, dp_row);
            for (j, out) in ds.row_mut(i).iter_mut().enumerate() {
                *out = scale * p_row[j] * (dp_row[j] - inner);
            }
        }
        write_head(&mut dq, &ds.matmul(&kh), h, dh);
        write_head(&mut dk, &ds.t_matmul(&qh), h, dh);
    }

    let mut dx = d_resid;
    dx.add_assign(&layer.attn_q.backward(&cache.input, &dq, &mut grad.attn_q));
    dx.add_assign(&layer.attn_k.backward(&cache.input, &dk, &mut grad.attn_k));
    dx.add_assign(&layer.attn_v.backward(&cache.input, &dv, &mut grad.attn_v));
    dx
}

fn check_input(embeddings: &Matrix, params: &EncoderParams, pad_mask: &[bool]) -> Result<(), EncoderError> {
    if params.layers.is_empty() {
        return Err(EncoderError::ShapeMismatch("encoder has no layers".into()));
    }
    if embeddings.rows() != pad_mask.len() {
        return Err(EncoderError::ShapeMismatch(format!(
            "{} embedding rows vs {} mask entries",
            embeddings.rows(),
            pad_mask.len()
        )));
    }
    if embeddings.cols() != params.d_model() {
        return Err(EncoderError::ShapeMismatch(format!(
            "embedding width {} vs d_model {}",
            embeddings.cols(),
            params.d_model()
        )));
    }
    if params.n_heads == 0 || !params.d_model().is_multiple_of(params.n_heads) {
        return Err(EncoderError::ShapeMismatch(format!(
            "d_model {} not divisible by {} heads",
            params.d_model(),
            params.n_heads
        )));
    }
    Ok(())
}

/// Inference forward pass.
pub fn encoder_forward(
    embeddings: &Matrix,
    params: &EncoderParams,
    pad_mask: &[bool],
) -> Result<HiddenStates, EncoderError> {
    encoder_forward_cached(embeddings, params, pad_mask, None).map(|(h, _)| h)
}

/// Forward pass that also returns the activations needed by
/// [`encoder_backward`]. Dropout applies only when `dropout` is given.
pub fn encoder_forward_cached(
    embeddings: &Matrix,
    params: &EncoderParams,
    pad_mask: &[bool],
    mut dropout: Option<&mut Dropout<'_>>,
) -> Result<(HiddenStates, ForwardCache), EncoderError> {
    check_input(embeddings, params, pad_mask)?;
    let mut x = embeddings.clone();
    let mut outputs = Vec::with_capacity(params.layers.len());
    let mut caches = Vec::with_capacity(params.layers.len());
    for (i, layer) in params.layers.iter().enumerate() {
        let (out, cache) = layer_forward(layer, &x, pad_mask, params.n_heads, dropout.as_deref_mut());
        if !out.is_finite() {
            return Err(EncoderError::NonFiniteActivation { layer: i });
        }
        outputs.push(out.clone());
        caches.push(cache);
        x = out;
    }
    Ok((
        HiddenStates { layers: outputs },
        ForwardCache {
            pad_mask: pad_mask.to_vec(),
            layers: caches,
        },
    ))
}

/// Gradients of every encoder parameter plus `dL/d(embeddings)`, given the
/// gradient with respect to the final hidden states.
pub fn encoder_backward(
    upstream: &Matrix,
    cache: Option<&ForwardCache>,
    params: &EncoderParams,
) -> Result<(EncoderParams, Matrix), EncoderError> {
    let cache = cache.ok_or(EncoderError::MissingCache)?;
    if cache.layers.len() != params.layers.len() {
        return Err(EncoderError::ShapeMismatch(format!(
            "cache has {} layers, params {}",
            cache.layers.len(),
            params.layers.len()
        )));
    }
    let expected = (cache.pad_mask.len(), params.d_model());
    if upstream.shape() != expected {
        return Err(EncoderError::ShapeMismatch(format!(
            "upstream gradient {:?}, expected {:?}",
            upstream.shape(),
            expected
        )));
    }
    let mut grads = params.zeros_like();
    let mut d = upstream.clone();
    for i in (0..params.layers.len()).rev() {
        d = layer_backward(
            &params.layers[i],
            &cache.layers[i],
            &d,
            params.n_heads,
            &mut grads.layers[i],
        );
    }
    Ok((grads, d))
}

/// Final-layer row 0.
pub fn pool_cls(states: &HiddenStates) -> Vec<f64> {
    states.cls_vector().to_vec()
}

pub fn pool(states: &HiddenStates, pad_mask: &[bool], pooling: Pooling) -> Vec<f64> {
    match pooling {
        Pooling::Cls => pool_cls(states),
        Pooling::Mean => {
            let last = states.last();
            let mut out = vec![0.0; last.cols()];
            let mut count = 0usize;
            for (r, &keep) in pad_mask.iter().enumerate() {
                if keep {
                    for (o, v) in out.iter_mut().zip(last.row(r)) {
                        *o += v;
                    }
                    count += 1;
                }
            }
            let inv = 1.0 / count.max(1) as f64;
            out.iter_mut().for_each(|v| *v *= inv);
            out
        }
    }
}

/// Spreads the pooled-vector gradient back over the final hidden states.
pub fn pool_backward(d_pooled: &[f64], pad_mask: &[bool], pooling: Pooling) -> Matrix {
    let n = pad_mask.len();
    let mut d = Matrix::zeros(n, d_pooled.len());
    match pooling {
        Pooling::Cls => d.row_mut(0).copy_from_slice(d_pooled),
        Pooling::Mean => {
            let count = pad_mask.iter().filter(|&&m| m).count().max(1);
            let inv = 1.0 / count as f64;
            for (r, &keep) in pad_mask.iter().enumerate() {
                if keep {
                    for (o, g) in d.row_mut(r).iter_mut().zip(d_pooled) {
                        *o = g * inv;
                    }
                }
            }
        }
    }
    d
}

/// Embedding tables plus encoder stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub embeddings: EmbeddingTables,
    pub params: EncoderParams,
}

/// Gradients for an [`Encoder`], mirroring its layout.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrads {
    pub embeddings: EmbeddingTables,
    pub params: EncoderParams,
}

impl Encoder {
    /// Xavier-uniform initialization seeded from `config.seed`.
    pub fn new(config: EncoderConfig) -> Result<Self, EncoderError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d_model;
        let embeddings = EmbeddingTables {
            word: Matrix::xavier(config.vocab_size, d, &mut rng),
            segment: Matrix::xavier(SEGMENT_ROWS, d, &mut rng),
            position: Matrix::xavier(config.max_positions, d, &mut rng),
        };
        let layers = (0..config.n_layers)
            .map(|_| EncoderLayer::init(d, config.d_ff, &mut rng))
            .collect();
        Ok(Self {
            params: EncoderParams {
                n_heads: config.n_heads,
                layers,
            },
            embeddings,
            config,
        })
    }

    pub fn zero_grads(&self) -> EncoderGrads {
        EncoderGrads {
            embeddings: self.embeddings.zeros_like(),
            params: self.params.zeros_like(),
        }
    }

    pub fn forward(&self, seq: &TokenSequence) -> Result<HiddenStates, EncoderError> {
        let x = embed(seq, &self.embeddings)?;
        encoder_forward(&x, &self.params, &seq.pad_mask)
    }

    pub fn forward_cached(
        &self,
        seq: &TokenSequence,
        dropout: Option<&mut Dropout<'_>>,
    ) -> Result<(HiddenStates, ForwardCache), EncoderError> {
        let x = embed(seq, &self.embeddings)?;
        encoder_forward_cached(&x, &self.params, &seq.pad_mask, dropout)
    }

    /// Pooled representation under the configured pooling mode.
    pub fn represent(&self, seq: &TokenSequence) -> Result<Vec<f64>, EncoderError> {
        let states = self.forward(seq)?;
        Ok(pool(&states, &seq.pad_mask, self.config.pooling))
    }

    /// Full backward from a gradient on the pooled vector.
    pub fn backward_pooled(
        &self,
        seq: &TokenSequence,
        cache: &ForwardCache,
        d_pooled: &[f64],
    ) -> Result<EncoderGrads, EncoderError> {
        let upstream = pool_backward(d_pooled, &seq.pad_mask, self.config.pooling);
        let (params, d_embed) = encoder_backward(&upstream, Some(cache), &self.params)?;
        let mut embeddings = self.embeddings.zeros_like();
        embed_backward(&d_embed, seq, &mut embeddings);
        Ok(EncoderGrads { embeddings, params })
    }
}

impl Parameters for Encoder {
    fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out = self.embeddings.tensors();
        out.extend(self.params.tensors());
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = self.embeddings.tensors_mut();
        out.extend(self.params.tensors_mut());
        out
    }
}

impl Parameters for EncoderGrads {
    fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out = self.embeddings.tensors();
        out.extend(self.params.tensors());
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = self.embeddings.tensors_mut();
        out.extend(self.params.tensors_mut());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::{assemble_sequence, PAD_ID};

    fn tiny_config() -> EncoderConfig {
        EncoderConfig {
            vocab_size: 20,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 16,
            max_positions: 16,
            dropout_rate: 0.0,
            pooling: Pooling::Cls,
            seed: 11,
        }
    }

    fn sample_seq() -> TokenSequence {
        assemble_sequence(&[vec![4, 5, 6], vec![7, 8]], 10).unwrap()
    }

    #[test]
    fn embed_of_zero_tables_is_zero() {
        let t = EmbeddingTables::zeros(10, 8, 4);
        let seq = assemble_sequence(&[vec![4, 5]], 3).unwrap();
        let out = embed(&seq, &t).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn embed_sums_unit_vectors() {
        let mut t = EmbeddingTables::zeros(10, 8, 3);
        let seq = assemble_sequence(&[vec![4]], 1).unwrap();
        // row 1 of the sequence: token 4, segment 0, position 1
        t.word.set(4, 0, 1.0);
        t.segment.set(0, 1, 1.0);
        t.position.set(1, 2, 1.0);
        let out = embed(&seq, &t).unwrap();
        assert_eq!(out.row(1), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn embed_rejects_out_of_range_ids() {
        let t = EmbeddingTables::zeros(5, 8, 3);
        let seq = assemble_sequence(&[vec![9]], 2).unwrap();
        assert!(matches!(
            embed(&seq, &t),
            Err(EncoderError::IndexOutOfBounds { what: "token", .. })
        ));
    }

    #[test]
    fn attention_rows_normalized_and_pads_ignored() {
        let enc = Encoder::new(tiny_config()).unwrap();
        let seq = sample_seq();
        let (_, cache) = enc.forward_cached(&seq, None).unwrap();
        for layer in &cache.layers {
            for p in &layer.probs {
                for i in 0..p.rows() {
                    let row = p.row(i);
                    let sum: f64 = row.iter().sum();
                    assert!((sum - 1.0).abs() < 1e-6);
                    for (j, &w) in row.iter().enumerate() {
                        if !seq.pad_mask[j] {
                            assert_eq!(w, 0.0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn layer_norm_statistics() {
        let enc = Encoder::new(tiny_config()).unwrap();
        let (_, cache) = enc.forward_cached(&sample_seq(), None).unwrap();
        for layer in &cache.layers {
            for ln in [layer.norm_attn(), layer.norm_ff()] {
                for r in 0..ln.xhat.rows() {
                    let row = ln.xhat.row(r);
                    let mean = row.iter().sum::<f64>() / row.len() as f64;
                    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / row.len() as f64;
                    assert!(mean.abs() < 1e-6);
                    assert!((var - 1.0).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn cls_ignores_pad_token_content() {
        let enc = Encoder::new(tiny_config()).unwrap();
        let seq = sample_seq();
        let mut altered = seq.clone();
        for (t, keep) in altered.token_ids.iter_mut().zip(&seq.pad_mask) {
            if !keep {
                assert_eq!(*t, PAD_ID);
                *t = 13;
            }
        }
        let a = enc.forward(&seq).unwrap();
        let b = enc.forward(&altered).unwrap();
        assert_eq!(pool_cls(&a), pool_cls(&b));
    }

    #[test]
    fn cls_unchanged_by_extra_trailing_pads() {
        let enc = Encoder::new(tiny_config()).unwrap();
        let seq = sample_seq();
        let mut longer = seq.clone();
        for extra in 0..3u32 {
            longer.token_ids.push(PAD_ID);
            longer.segment_ids.push(0);
            longer.position_ids.push(seq.len() as u32 + extra);
            longer.pad_mask.push(false);
        }
        let a = enc.forward(&seq).unwrap();
        let b = enc.forward(&longer).unwrap();
        assert_eq!(pool_cls(&a), pool_cls(&b));
        assert_eq!(pool_cls(&a), a.last().row(0));
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let enc = Encoder::new(tiny_config()).unwrap();
        let seq = sample_seq();
        let (_, cache) = enc.forward_cached(&seq, None).unwrap();
        let g = enc.backward_pooled(&seq, &cache, &[0.0; 8]).unwrap();
        for (_, t) in g.tensors() {
            assert!(t.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn backward_requires_cache() {
        let enc = Encoder::new(tiny_config()).unwrap();
        let up = Matrix::zeros(4, 8);
        assert!(matches!(
            encoder_backward(&up, None, &enc.params),
            Err(EncoderError::MissingCache)
        ));
    }

    #[test]
    fn layer_norm_gain_gradient_closed_form() {
        // With gain 1 and bias 0 on an input whose rows are already
        // standardized, xhat == x and dL/dgain_c = sum_r dy[r][c] * x[r][c].
        let x = Matrix::from_rows(&[vec![1.0, -1.0, 1.0, -1.0], vec![-1.0, -1.0, 1.0, 1.0]]);
        let dy = Matrix::from_rows(&[vec![0.5, 2.0, -1.0, 3.0], vec![1.0, -0.5, 0.25, 2.0]]);
        let ln = LayerNorm::new(4);
        let (_, cache) = ln.forward(&x);
        let mut grad = ln.zeros_like();
        ln.backward(&dy, &cache, &mut grad);
        let expected = [0.5 - 1.0, -2.0 + 0.5, -1.0 + 0.25, -3.0 + 2.0];
        for (g, e) in grad.gain.iter().zip(expected) {
            assert!((g - e).abs() < 1e-9, "{g} vs {e}");
        }
        assert_eq!(grad.bias, vec![1.5, 1.5, -0.75, 5.0]);
    }

    #[test]
    fn gelu_derivative_matches_difference_quotient() {
        for &x in &[-3.0, -0.5, 0.0, 0.7, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn config_validation() {
        let mut c = tiny_config();
        c.n_heads = 3;
        assert!(Encoder::new(c).is_err());
        let mut c = tiny_config();
        c.d_ff = 0;
        assert!(Encoder::new(c).is_err());
    }

    #[test]
    fn forward_is_deterministic() {
        let enc = Encoder::new(tiny_config()).unwrap();
        let seq = sample_seq();
        assert_eq!(enc.forward(&seq).unwrap(), enc.forward(&seq).unwrap());
        assert_eq!(Encoder::new(tiny_config()).unwrap(), enc);
    }
}
