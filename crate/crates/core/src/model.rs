//! A small decoder-only transformer: byte vocabulary, pre-RMSNorm blocks,
//! per-head causal attention (optionally rotary), plain or gated FFN.
//!
//! Weights follow the `X·W` convention: every projection is stored
//! input-dim × output-dim. Attention heads are kept as separate matrices so
//! that pruned heads (low-rank query/key, reduced value/output width) run
//! through the same forward code as dense ones.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calibration::LowRankAdapter;
use crate::checkpoint::PruningMeta;
use crate::error::{OlicaError, Result};
use crate::ffn::FfnWeights;
use crate::tensor::{dot, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
    Silu,
}

impl Activation {
    #[inline]
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            // tanh approximation
            Activation::Gelu => {
                0.5 * v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v * v * v)).tanh())
            }
            Activation::Silu => v / (1.0 + (-v).exp()),
        }
    }
}

fn default_rope_base() -> f64 {
    10000.0
}

fn default_norm_eps() -> f64 {
    1e-5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_blocks: usize,
    pub d: usize,
    pub h: usize,
    pub ffn_width: usize,
    pub vocab_size: usize,
    pub activation: Activation,
    pub gated: bool,
    pub rope: bool,
    pub max_seq_len: usize,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
}

impl ModelConfig {
    /// The bundled toy architecture: 4 blocks, d = 64, 4 heads, m = 256,
    /// byte vocabulary, gated SiLU FFN with rotary attention.
    pub fn toy() -> Self {
        ModelConfig {
            n_blocks: 4,
            d: 64,
            h: 4,
            ffn_width: 256,
            vocab_size: 256,
            activation: Activation::Silu,
            gated: true,
            rope: true,
            max_seq_len: 256,
            rope_base: default_rope_base(),
            norm_eps: default_norm_eps(),
        }
    }

    pub fn d_h(&self) -> usize {
        self.d / self.h
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_blocks", self.n_blocks),
            ("d", self.d),
            ("h", self.h),
            ("ffn_width", self.ffn_width),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(OlicaError::arg(format!("model config: {name} must be >= 1")));
        }
        if !self.d.is_multiple_of(self.h) {
            return Err(OlicaError::arg(format!(
                "model config: d = {} is not divisible by h = {}",
                self.d, self.h
            )));
        }
        if self.rope && !self.d_h().is_multiple_of(2) {
            return Err(OlicaError::arg("model config: rotary embedding needs an even head dimension"));
        }
        if !(self.norm_eps > 0.0 && self.rope_base > 0.0) {
            return Err(OlicaError::arg("model config: norm_eps and rope_base must be positive"));
        }
        Ok(())
    }
}

/// A per-head query or key projection, d → d_h.
#[derive(Debug, Clone, PartialEq)]
pub enum Projection {
    Dense(Matrix),
    /// `left` (d×k) followed by `right` (k×d_h)
    LowRank { left: Matrix, right: Matrix },
}

impl Projection {
    pub fn apply(&self, x: &Matrix) -> Matrix {
        match self {
            Projection::Dense(w) => x.matmul(w),
            Projection::LowRank { left, right } => x.matmul(left).matmul(right),
        }
    }

    pub fn to_dense(&self) -> Matrix {
        match self {
            Projection::Dense(w) => w.clone(),
            Projection::LowRank { left, right } => left.matmul(right),
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            Projection::Dense(w) => w.cols(),
            Projection::LowRank { right, .. } => right.cols(),
        }
    }

    /// `None` for dense projections.
    pub fn rank(&self) -> Option<usize> {
        match self {
            Projection::Dense(_) => None,
            Projection::LowRank { left, .. } => Some(left.cols()),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Projection::Dense(w) => w.rows() * w.cols(),
            Projection::LowRank { left, right } => left.rows() * left.cols() + right.rows() * right.cols(),
        }
    }
}

/// One attention head. `wv` and `wo` are d×k_vo with k_vo ≤ d_h.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionHead {
    pub q: Projection,
    pub k: Projection,
    pub wv: Matrix,
    pub wo: Matrix,
}

impl AttentionHead {
    pub fn vo_width(&self) -> usize {
        self.wv.cols()
    }

    pub fn param_count(&self) -> usize {
        self.q.param_count() + self.k.param_count() + 2 * self.wv.rows() * self.wv.cols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub attn_norm: Vec<f64>,
    pub heads: Vec<AttentionHead>,
    pub ffn_norm: Vec<f64>,
    pub ffn: FfnWeights,
    pub adapter: Option<LowRankAdapter>,
}

/// Normalized inputs seen by one block's two sublayers.
#[derive(Debug, Clone)]
pub struct BlockActivations {
    pub mha_input: Matrix,
    pub ffn_input: Matrix,
}

impl Block {
    pub fn param_count(&self) -> usize {
        self.attn_norm.len()
            + self.ffn_norm.len()
            + self.heads.iter().map(AttentionHead::param_count).sum::<usize>()
            + self.ffn.param_count()
            + self.adapter.as_ref().map_or(0, LowRankAdapter::param_count)
    }

    /// `X + MHA(norm(X))` followed by `· + FFN(norm(·))`.
    pub fn forward(&self, x: &Matrix, cfg: &ModelConfig) -> Result<Matrix> {
        Ok(self.forward_with_activations(x, cfg)?.0)
    }

    pub fn forward_with_activations(&self, x: &Matrix, cfg: &ModelConfig) -> Result<(Matrix, BlockActivations)> {
        let a = rms_norm(x, &self.attn_norm, cfg.norm_eps);
        let mid = x.add(&mha_forward(&self.heads, &a, cfg)?);
        let f = rms_norm(&mid, &self.ffn_norm, cfg.norm_eps);
        let out = mid.add(&ffn_forward(&self.ffn, self.adapter.as_ref(), &f, cfg.activation));
        Ok((
            out,
            BlockActivations {
                mha_input: a,
                ffn_input: f,
            },
        ))
    }
}

/// Normalized sublayer inputs captured per block, rows accumulated across
/// every traced sequence.
#[derive(Debug, Clone, Default)]
pub struct ActivationTrace {
    pub mha_inputs: Vec<Matrix>,
    pub ffn_inputs: Vec<Matrix>,
}

impl ActivationTrace {
    pub fn record(&mut self, layer: usize, acts: &BlockActivations) {
        while self.mha_inputs.len() <= layer {
            self.mha_inputs.push(Matrix::zeros(0, acts.mha_input.cols()));
            self.ffn_inputs.push(Matrix::zeros(0, acts.ffn_input.cols()));
        }
        self.mha_inputs[layer].append_rows(&acts.mha_input);
        self.ffn_inputs[layer].append_rows(&acts.ffn_input);
    }

    pub fn n_tokens(&self) -> usize {
        self.mha_inputs.first().map_or(0, Matrix::rows)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    /// vocab×d
    pub embed: Matrix,
    pub blocks: Vec<Block>,
    pub final_norm: Vec<f64>,
    /// d×vocab
    pub proj: Matrix,
    pub pruning: Option<PruningMeta>,
}

impl Model {
    /// Seeded random initialization (uniform, std 0.02), unit norm scales.
    pub fn random(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = 0.02 * 3f64.sqrt();
        let mut init = |r: usize, c: usize| Matrix::from_fn(r, c, |_, _| rng.gen_range(-a..a));
        let (d, dh, m, v) = (config.d, config.d_h(), config.ffn_width, config.vocab_size);
        let embed = init(v, d);
        let mut blocks = Vec::with_capacity(config.n_blocks);
        for _ in 0..config.n_blocks {
            let heads = (0..config.h)
                .map(|_| AttentionHead {
                    q: Projection::Dense(init(d, dh)),
                    k: Projection::Dense(init(d, dh)),
                    wv: init(d, dh),
                    wo: init(d, dh),
                })
                .collect();
            let wu = init(d, m);
            let wd = init(d, m);
            let wg = config.gated.then(|| init(d, m));
            blocks.push(Block {
                attn_norm: vec![1.0; d],
                heads,
                ffn_norm: vec![1.0; d],
                ffn: FfnWeights::new(wu, wd, wg)?,
                adapter: None,
            });
        }
        let proj = init(d, v);
        Ok(Model {
            config,
            embed,
            blocks,
            final_norm: vec![1.0; d],
            proj,
            pruning: None,
        })
    }

    pub fn param_count(&self) -> usize {
        self.embed.data().len()
            + self.proj.data().len()
            + self.final_norm.len()
            + self.blocks.iter().map(Block::param_count).sum::<usize>()
    }

    pub fn embed_tokens(&self, tokens: &[u32]) -> Result<Matrix> {
        if tokens.is_empty() {
            return Err(OlicaError::arg("empty token sequence"));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(OlicaError::arg(format!(
                "sequence of {} tokens exceeds max_seq_len {}",
                tokens.len(),
                self.config.max_seq_len
            )));
        }
        let mut rows = Vec::with_capacity(tokens.len());
        for &t in tokens {
            if t as usize >= self.config.vocab_size {
                return Err(OlicaError::arg(format!(
                    "token {t} outside vocabulary of {}",
                    self.config.vocab_size
                )));
            }
            rows.push(self.embed.row(t as usize).to_vec());
        }
        Ok(Matrix::from_rows(&rows))
    }

    /// Final norm and output projection applied to hidden states.
    pub fn logits_from_hidden(&self, hidden: &Matrix) -> Matrix {
        rms_norm(hidden, &self.final_norm, self.config.norm_eps).matmul(&self.proj)
    }

    /// Logits, one row per position (n×vocab).
    pub fn forward(&self, tokens: &[u32]) -> Result<Matrix> {
        let mut x = self.embed_tokens(tokens)?;
        for block in &self.blocks {
            x = block.forward(&x, &self.config)?;
        }
        Ok(self.logits_from_hidden(&x))
    }

    /// Like [`Model::forward`], additionally appending every block's
    /// normalized MHA and FFN inputs to `trace`.
    pub fn forward_traced(&self, tokens: &[u32], trace: &mut ActivationTrace) -> Result<Matrix> {
        let mut x = self.embed_tokens(tokens)?;
        for (l, block) in self.blocks.iter().enumerate() {
            let (out, acts) = block.forward_with_activations(&x, &self.config)?;
            trace.record(l, &acts);
            x = out;
        }
        Ok(self.logits_from_hidden(&x))
    }
}

pub fn rms_norm(x: &Matrix, gain: &[f64], eps: f64) -> Matrix {
    let d = x.cols();
    assert_eq!(gain.len(), d);
    let mut out = x.clone();
    for i in 0..x.rows() {
        let row = out.row_mut(i);
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let inv = 1.0 / (ms + eps).sqrt();
        for (v, g) in row.iter_mut().zip(gain) {
            *v *= inv * g;
        }
    }
    out
}

/// Rotates feature pairs (2j, 2j+1) of row `t` by `t · base^(−2j/d_h)`.
pub fn apply_rope(x: &mut Matrix, base: f64) {
    let dh = x.cols();
    for t in 0..x.rows() {
        let row = x.row_mut(t);
        for j in 0..dh / 2 {
            let theta = base.powf(-((2 * j) as f64) / dh as f64);
            let (sin, cos) = (t as f64 * theta).sin_cos();
            let (a, b) = (row[2 * j], row[2 * j + 1]);
            row[2 * j] = a * cos - b * sin;
            row[2 * j + 1] = a * sin + b * cos;
        }
    }
}

/// In-place numerically stable softmax of each row, restricted to the first
/// `t + 1` columns of row `t` (causal); later columns become 0.
fn causal_softmax(scores: &mut Matrix) {
    for t in 0..scores.rows() {
        let row = scores.row_mut(t);
        let (visible, hidden) = row.split_at_mut(t + 1);
        let max = visible.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in visible.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in visible.iter_mut() {
            *v /= sum;
        }
        hidden.fill(0.0);
    }
}

/// Causal attention probabilities of one head on normalized inputs `x`.
pub fn attention_probs(head: &AttentionHead, x: &Matrix, cfg: &ModelConfig) -> Matrix {
    let mut q = head.q.apply(x);
    let mut k = head.k.apply(x);
    if cfg.rope {
        apply_rope(&mut q, cfg.rope_base);
        apply_rope(&mut k, cfg.rope_base);
    }
    let scale = 1.0 / (cfg.d_h() as f64).sqrt();
    let n = x.rows();
    let mut scores = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            scores[(i, j)] = dot(q.row(i), k.row(j)) * scale;
        }
    }
    causal_softmax(&mut scores);
    scores
}

/// `Σ_heads softmax(q kᵀ / √d_h) · X·wv · woᵀ` with a causal mask, on
/// already-normalized inputs `x` (n×d).
pub fn mha_forward(heads: &[AttentionHead], x: &Matrix, cfg: &ModelConfig) -> Result<Matrix> {
    if x.cols() != cfg.d {
        return Err(OlicaError::arg(format!(
            "attention input has {} features, model has d = {}",
            x.cols(),
            cfg.d
        )));
    }
    if x.rows() > cfg.max_seq_len {
        return Err(OlicaError::arg(format!(
            "sequence of {} tokens exceeds max_seq_len {}",
            x.rows(),
            cfg.max_seq_len
        )));
    }
    let mut out = Matrix::zeros(x.rows(), cfg.d);
    for head in heads {
        let probs = attention_probs(head, x, cfg);
        let v = x.matmul(&head.wv);
        out.add_assign(&probs.matmul(&v).matmul_t(&head.wo));
    }
    Ok(out)
}

/// FFN on normalized inputs `x`, plus the adapter term `x·w1·w2ᵀ` when given.
pub fn ffn_forward(ffn: &FfnWeights, adapter: Option<&LowRankAdapter>, x: &Matrix, act: Activation) -> Matrix {
    let hidden = match &ffn.wg {
        None => x.matmul(&ffn.wu).map(|v| act.apply(v)),
        Some(wg) => {
            let up = x.matmul(&ffn.wu);
            let gate = x.matmul(wg);
            let mut h = up;
            for (u, g) in h.data_mut().iter_mut().zip(gate.data()) {
                *u *= act.apply(*g);
            }
            h
        }
    };
    let mut out = hidden.matmul_t(&ffn.wd);
    if let Some(a) = adapter {
        out.add_assign(&a.apply(x));
    }
    out
}

/// Byte-level tokenizer: one token per UTF-8 byte.
pub fn tokenize(text: &str) -> Vec<u32> {
    tokenize_bytes(text.as_bytes())
}

pub fn tokenize_bytes(bytes: &[u8]) -> Vec<u32> {
    bytes.iter().map(|&b| u32::from(b)).collect()
}

/// Mean next-token negative log-likelihood over non-overlapping windows of
/// `seq_len` predictions, returned with the number of scored tokens.
pub fn mean_nll(model: &Model, tokens: &[u32], seq_len: usize) -> Result<(f64, usize)> {
    if tokens.is_empty() {
        return Err(OlicaError::arg("empty token stream"));
    }
    if seq_len == 0 || tokens.len() < seq_len + 1 {
        return Err(OlicaError::arg(format!(
            "token stream of {} is too short for windows of {seq_len}",
            tokens.len()
        )));
    }
    let windows = (tokens.len() - 1) / seq_len;
    let mut total = 0.0;
    for w in 0..windows {
        let start = w * seq_len;
        let logits = model.forward(&tokens[start..start + seq_len])?;
        for t in 0..seq_len {
            let row = logits.row(t);
            let target = tokens[start + t + 1] as usize;
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[target];
        }
    }
    let count = windows * seq_len;
    Ok((total / count as f64, count))
}

/// `exp(mean NLL)` over non-overlapping windows of `seq_len`.
pub fn perplexity(model: &Model, tokens: &[u32], seq_len: usize) -> Result<f64> {
    Ok(mean_nll(model, tokens, seq_len)?.0.exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;

    fn tiny_config(gated: bool, rope: bool) -> ModelConfig {
        ModelConfig {
            n_blocks: 2,
            d: 8,
            h: 2,
            ffn_width: 16,
            vocab_size: 32,
            activation: Activation::Silu,
            gated,
            rope,
            max_seq_len: 16,
            rope_base: 10000.0,
            norm_eps: 1e-5,
        }
    }

    /// Straight-line reference attention: explicit loops, no matrix helpers.
    #[allow(clippy::needless_range_loop)]
    fn naive_mha(model: &Model, block: &Block, x: &Matrix) -> Vec<Vec<f64>> {
        let cfg = &model.config;
        let (n, d, dh) = (x.rows(), cfg.d, cfg.d_h());
        let mut out = vec![vec![0.0; d]; n];
        for head in &block.heads {
            let wq = head.q.to_dense();
            let wk = head.k.to_dense();
            let proj = |w: &Matrix, t: usize| -> Vec<f64> {
                (0..w.cols()).map(|c| (0..d).map(|i| x[(t, i)] * w[(i, c)]).sum()).collect()
            };
            let rot = |v: Vec<f64>, t: usize| -> Vec<f64> {
                if !cfg.rope {
                    return v;
                }
                let mut r = v.clone();
                for j in 0..dh / 2 {
                    let ang = t as f64 * cfg.rope_base.powf(-((2 * j) as f64) / dh as f64);
                    r[2 * j] = v[2 * j] * ang.cos() - v[2 * j + 1] * ang.sin();
                    r[2 * j + 1] = v[2 * j] * ang.sin() + v[2 * j + 1] * ang.cos();
                }
                r
            };
            let qs: Vec<Vec<f64>> = (0..n).map(|t| rot(proj(&wq, t), t)).collect();
            let ks: Vec<Vec<f64>> = (0..n).map(|t| rot(proj(&wk, t), t)).collect();
            let vs: Vec<Vec<f64>> = (0..n).map(|t| proj(&head.wv, t)).collect();
            for t in 0..n {
                let s: Vec<f64> = (0..=t)
                    .map(|u| (0..dh).map(|c| qs[t][c] * ks[u][c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let lse = oracle::log_sum_exp(&s);
                for (u, su) in s.iter().enumerate() {
                    let p = (su - lse).exp();
                    for o in 0..d {
                        let mut acc = 0.0;
                        for c in 0..head.wv.cols() {
                            acc += vs[u][c] * head.wo[(o, c)];
                        }
                        out[t][o] += p * acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn single_token_attention_is_value_output_product() {
        let model = Model::random(tiny_config(false, true), 1).unwrap();
        let x = Matrix::from_fn(1, 8, |_, j| j as f64 * 0.1 - 0.3);
        let out = mha_forward(&model.blocks[0].heads, &x, &model.config).unwrap();
        let mut expected = Matrix::zeros(1, 8);
        for h in &model.blocks[0].heads {
            expected.add_assign(&x.matmul(&h.wv).matmul_t(&h.wo));
        }
        assert!(out.max_abs_diff(&expected) < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let model = Model::random(tiny_config(true, true), 2).unwrap();
        let x = model.embed_tokens(&[1, 2, 3, 4, 5, 6]).unwrap();
        for h in &model.blocks[0].heads {
            let p = attention_probs(h, &x.scale(40.0), &model.config);
            for t in 0..p.rows() {
                let s: f64 = p.row(t).iter().sum();
                assert!((s - 1.0).abs() < 1e-6);
                assert!(p.row(t)[t + 1..].iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn mha_matches_naive_loop() {
        for rope in [false, true] {
            let model = Model::random(tiny_config(false, rope), 3).unwrap();
            let x = model.embed_tokens(&[5, 9, 1]).unwrap().scale(30.0);
            let out = mha_forward(&model.blocks[0].heads, &x, &model.config).unwrap();
            let expected = Matrix::from_rows(&naive_mha(&model, &model.blocks[0], &x));
            assert!(out.max_abs_diff(&expected) < 1e-6);
        }
    }

    #[test]
    fn mha_rejects_long_sequences() {
        let model = Model::random(tiny_config(false, false), 4).unwrap();
        let x = Matrix::zeros(17, 8);
        assert!(mha_forward(&model.blocks[0].heads, &x, &model.config).is_err());
        assert!(model.forward(&[0; 17]).is_err());
    }

    #[test]
    fn ffn_examples() {
        let ffn = FfnWeights::new(Matrix::identity(2), Matrix::identity(2), None).unwrap();
        let zero = ffn_forward(&ffn, None, &Matrix::zeros(1, 2), Activation::Relu);
        assert_eq!(zero, Matrix::zeros(1, 2));
        let y = ffn_forward(&ffn, None, &Matrix::from_rows(&[[-1.0, 2.0]]), Activation::Relu);
        assert_eq!(y, Matrix::from_rows(&[[0.0, 2.0]]));
    }

    #[test]
    fn gated_silu_matches_scalar_loop() {
        let model = Model::random(tiny_config(true, false), 5).unwrap();
        let ffn = &model.blocks[1].ffn;
        let x = Matrix::from_fn(3, 8, |i, j| ((i * 8 + j) as f64).sin());
        let y = ffn_forward(ffn, None, &x, Activation::Silu);
        let wg = ffn.wg.as_ref().unwrap();
        for t in 0..3 {
            for o in 0..8 {
                let mut acc = 0.0;
                for j in 0..16 {
                    let mut u = 0.0;
                    let mut g = 0.0;
                    for i in 0..8 {
                        u += x[(t, i)] * ffn.wu[(i, j)];
                        g += x[(t, i)] * wg[(i, j)];
                    }
                    acc += u * (g / (1.0 + (-g).exp())) * ffn.wd[(o, j)];
                }
                assert!((y[(t, o)] - acc).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn adapter_term_is_linear_add_on() {
        let model = Model::random(tiny_config(true, false), 6).unwrap();
        let ffn = &model.blocks[0].ffn;
        let adapter = LowRankAdapter {
            w1: Matrix::from_fn(8, 2, |i, j| (i + j) as f64 * 0.1),
            w2: Matrix::from_fn(8, 2, |i, j| (i as f64 - j as f64) * 0.05),
            layer_index: 0,
            lambda_used: 0.0,
            mc2: 0.0,
        };
        let x = Matrix::from_fn(4, 8, |i, j| ((i + 2 * j) as f64).cos());
        let with = ffn_forward(ffn, Some(&adapter), &x, Activation::Silu);
        let without = ffn_forward(ffn, None, &x, Activation::Silu);
        let term = x.matmul(&adapter.w1).matmul_t(&adapter.w2);
        assert!(with.sub(&without).max_abs_diff(&term) < 1e-12);
    }

    #[test]
    fn zero_model_gives_flat_logits() {
        let mut model = Model::random(tiny_config(true, true), 7).unwrap();
        model.embed = Matrix::zeros(32, 8);
        model.proj = Matrix::zeros(8, 32);
        let logits = model.forward(&[3, 4, 5]).unwrap();
        for t in 0..3 {
            assert!(logits.row(t).iter().all(|&v| v == logits.row(t)[0]));
        }
    }

    #[test]
    fn causal_logits_ignore_future_tokens() {
        let model = Model::random(tiny_config(true, true), 8).unwrap();
        let a = model.forward(&[1, 2, 3, 4, 5]).unwrap();
        let b = model.forward(&[1, 2, 3, 9, 30]).unwrap();
        for t in 0..3 {
            for j in 0..32 {
                assert_eq!(a[(t, j)], b[(t, j)]);
            }
        }
    }

    #[test]
    fn rope_preserves_pair_norms() {
        let mut x = Matrix::from_fn(6, 8, |i, j| (i as f64 + 1.0) * (j as f64 - 3.5));
        let before = x.clone();
        apply_rope(&mut x, 10000.0);
        for t in 0..6 {
            for j in 0..4 {
                let n0 = before[(t, 2 * j)].hypot(before[(t, 2 * j + 1)]);
                let n1 = x[(t, 2 * j)].hypot(x[(t, 2 * j + 1)]);
                assert!((n0 - n1).abs() < 1e-6);
            }
        }
        assert_eq!(x.row(0), before.row(0));
    }

    #[test]
    fn uniform_model_perplexity_is_vocab_size() {
        let mut model = Model::random(tiny_config(false, false), 9).unwrap();
        model.proj = Matrix::zeros(8, 32);
        let tokens: Vec<u32> = (0..41).map(|i| (i * 7 % 32) as u32).collect();
        let ppl = perplexity(&model, &tokens, 8).unwrap();
        assert!((ppl - 32.0).abs() < 1e-9);
    }

    #[test]
    fn certain_model_perplexity_tends_to_one() {
        let mut model = Model::random(tiny_config(false, false), 10).unwrap();
        for b in &mut model.blocks {
            for h in &mut b.heads {
                h.wo = Matrix::zeros(8, 4);
            }
            b.ffn.wd = Matrix::zeros(8, 16);
        }
        model.embed = Matrix::from_fn(32, 8, |_, _| 1.0);
        model.proj = Matrix::from_fn(8, 32, |_, j| if j == 7 { 10.0 } else { 0.0 });
        let tokens = vec![7u32; 33];
        let ppl = perplexity(&model, &tokens, 16).unwrap();
        assert!(ppl < 1.0 + 1e-6, "{ppl}");
    }

    #[test]
    fn perplexity_matches_scalar_nll_loop() {
        let model = Model::random(tiny_config(true, true), 11).unwrap();
        let tokens: Vec<u32> = (0..30).map(|i| ((i * 13 + 5) % 32) as u32).collect();
        let seq = 7;
        let mut nll = 0.0;
        let mut count = 0;
        for w in 0..(tokens.len() - 1) / seq {
            let logits = model.forward(&tokens[w * seq..(w + 1) * seq]).unwrap();
            for t in 0..seq {
                let row = logits.row(t);
                nll -= row[tokens[w * seq + t + 1] as usize] - oracle::log_sum_exp(row);
                count += 1;
            }
        }
        let expected = (nll / count as f64).exp();
        assert!((perplexity(&model, &tokens, seq).unwrap() - expected).abs() < 1e-6);
        assert!(perplexity(&model, &[], seq).is_err());
        assert!(perplexity(&model, &tokens[..5], seq).is_err());
    }

    #[test]
    fn out_of_vocab_is_rejected() {
        let model = Model::random(tiny_config(false, false), 12).unwrap();
        assert!(model.forward(&[3, 32]).is_err());
    }

    #[test]
    fn trace_accumulates_rows() {
        let model = Model::random(tiny_config(true, true), 13).unwrap();
        let mut trace = ActivationTrace::default();
        model.forward_traced(&[1, 2, 3], &mut trace).unwrap();
        model.forward_traced(&[4, 5], &mut trace).unwrap();
        assert_eq!(trace.mha_inputs.len(), 2);
        assert_eq!(trace.n_tokens(), 5);
        assert_eq!(trace.ffn_inputs[1].shape(), (5, 8));
    }
}
