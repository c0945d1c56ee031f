//! Turns a whole-model sparsity target into kept dimensions per matrix.
//!
//! Embedding, output projection and norms count toward the model size but
//! are never pruned, so the prunable attention + FFN mass has to give up a
//! proportionally larger share `ŝ = s·M₁/M₂`. Query/key get `2ŝ` (as a
//! parameter reduction of their low-rank factor pairs), value/output `ŝ/2`,
//! and the FFN width is solved for whatever remains of the budget.

use serde::{Deserialize, Serialize};

use crate::error::{OlicaError, Result};
use crate::model::ModelConfig;

/// The tensor shapes that matter for parameter accounting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub n_blocks: usize,
    pub d: usize,
    pub h: usize,
    pub ffn_width: usize,
    pub vocab_size: usize,
    pub gated: bool,
}

impl ModelShape {
    pub fn from_config(cfg: &ModelConfig) -> Self {
        ModelShape {
            n_blocks: cfg.n_blocks,
            d: cfg.d,
            h: cfg.h,
            ffn_width: cfg.ffn_width,
            vocab_size: cfg.vocab_size,
            gated: cfg.gated,
        }
    }

    /// LLaMA-7B: 32 blocks, d = 4096, 32 heads, gated FFN of width 11008,
    /// vocabulary 32000.
    pub fn llama_7b() -> Self {
        ModelShape {
            n_blocks: 32,
            d: 4096,
            h: 32,
            ffn_width: 11008,
            vocab_size: 32000,
            gated: true,
        }
    }

    pub fn d_h(&self) -> usize {
        self.d / self.h
    }

    pub fn ffn_matrices(&self) -> usize {
        if self.gated {
            3
        } else {
            2
        }
    }

    /// M₂: attention plus FFN weights.
    pub fn prunable_params(&self) -> usize {
        self.n_blocks * (4 * self.d * self.d + self.ffn_matrices() * self.d * self.ffn_width)
    }

    /// M₁: every stored parameter.
    pub fn total_params(&self) -> usize {
        2 * self.vocab_size * self.d + self.d + self.n_blocks * 2 * self.d + self.prunable_params()
    }

    fn fixed_params(&self) -> usize {
        self.total_params() - self.prunable_params()
    }

    /// Parameters of one pruned block (norms included, adapters excluded).
    pub fn block_params(&self, dims: &LayerDims) -> usize {
        let dh = self.d_h();
        let qk = if dims.k_qk == dh {
            2 * self.d * dh
        } else {
            2 * dims.k_qk * (self.d + dh)
        };
        let vo = 2 * self.d * dims.k_vo;
        2 * self.d + self.h * (qk + vo) + self.ffn_matrices() * self.d * dims.k_ffn
    }

    /// Whole-model parameters for the given per-layer dims plus adapters.
    pub fn pruned_params(&self, layers: &[LayerDims], adapter_params: usize) -> usize {
        self.fixed_params() - self.n_blocks * 2 * self.d
            + layers.iter().map(|l| self.block_params(l)).sum::<usize>()
            + adapter_params
    }
}

/// Kept dimensions of one block: query/key rank per head, value/output
/// width per head, FFN width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDims {
    pub k_qk: usize,
    pub k_vo: usize,
    pub k_ffn: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Budget {
    pub s: f64,
    pub m1: usize,
    pub m2: usize,
    pub s_hat: f64,
    pub per_layer: Vec<LayerDims>,
    /// Adapter parameters the budget sets aside.
    pub adapter_params: usize,
    /// Parameter count of the allocated model, adapters included.
    pub allocated_params: usize,
}

impl Budget {
    pub fn achieved_sparsity(&self) -> f64 {
        1.0 - self.allocated_params as f64 / self.m1 as f64
    }
}

/// `ŝ = s·M₁/M₂`.
pub fn adjusted_sparsity(s: f64, m1: usize, m2: usize) -> f64 {
    s * m1 as f64 / m2 as f64
}

/// Query/key rank whose factor pair `k·(d + d_h)` stores a `1 − 2ŝ` share
/// of the dense `d·d_h`. Unpruned heads stay dense.
pub fn qk_rank(s_hat: f64, d: usize, dh: usize) -> usize {
    if s_hat <= 0.0 {
        return dh;
    }
    let k = ((1.0 - 2.0 * s_hat) * (d * dh) as f64 / (d + dh) as f64).floor() as usize;
    k.clamp(1, dh)
}

pub fn vo_width(s_hat: f64, dh: usize) -> usize {
    (((1.0 - s_hat / 2.0) * dh as f64).floor() as usize).clamp(1, dh)
}

/// Budget for sparsity `s` with `adapter_params` reserved for calibration
/// adapters (only charged when `s > 0`).
pub fn allocate(shape: &ModelShape, s: f64, adapter_params: usize) -> Result<Budget> {
    if shape.n_blocks == 0 || shape.h == 0 || !shape.d.is_multiple_of(shape.h) || shape.ffn_width == 0 {
        return Err(OlicaError::arg(format!("invalid model shape {shape:?}")));
    }
    if !(0.0..1.0).contains(&s) {
        return Err(OlicaError::arg(format!("sparsity {s} outside [0, 1)")));
    }
    match try_allocate(shape, s, adapter_params) {
        Some(b) => Ok(b),
        None => Err(OlicaError::Budget {
            requested: s,
            max_achievable: max_sparsity(shape, adapter_params),
        }),
    }
}

fn try_allocate(shape: &ModelShape, s: f64, adapter_params: usize) -> Option<Budget> {
    let (m1, m2) = (shape.total_params(), shape.prunable_params());
    let s_hat = adjusted_sparsity(s, m1, m2);
    if 2.0 * s_hat >= 1.0 {
        return None;
    }
    let dh = shape.d_h();
    let mut k_qk = qk_rank(s_hat, shape.d, dh);
    let mut k_vo = vo_width(s_hat, dh);
    let reserve = if s > 0.0 { adapter_params } else { 0 };
    let per_width = (shape.n_blocks * shape.ffn_matrices() * shape.d) as f64;
    let target = (1.0 - s) * m1 as f64;
    let k_ffn = loop {
        let attn_only = LayerDims { k_qk, k_vo, k_ffn: 0 };
        let fixed = shape.pruned_params(&vec![attn_only; shape.n_blocks], reserve) as f64;
        let k_ffn = ((target - fixed) / per_width).round();
        if k_ffn < 1.0 {
            return None;
        }
        // At very small s the floored attention dims can remove more than
        // the whole budget; hand dimensions back until the FFN can absorb it.
        if k_ffn as usize > shape.ffn_width {
            if k_vo < dh {
                k_vo += 1;
                continue;
            }
            if k_qk < dh {
                k_qk += 1;
                continue;
            }
        }
        break (k_ffn as usize).min(shape.ffn_width);
    };
    let per_layer = vec![LayerDims { k_qk, k_vo, k_ffn }; shape.n_blocks];
    let allocated_params = shape.pruned_params(&per_layer, reserve);
    Some(Budget {
        s,
        m1,
        m2,
        s_hat,
        per_layer,
        adapter_params: reserve,
        allocated_params,
    })
}

/// Largest sparsity (to about 1e-6) that [`allocate`] accepts.
pub fn max_sparsity(shape: &ModelShape, adapter_params: usize) -> f64 {
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if try_allocate(shape, mid, adapter_params).is_some() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toy() -> ModelShape {
        ModelShape::from_config(&ModelConfig::toy())
    }

    #[test]
    fn zero_sparsity_is_noop() {
        for shape in [toy(), ModelShape::llama_7b()] {
            let b = allocate(&shape, 0.0, 1234).unwrap();
            for l in &b.per_layer {
                assert_eq!(*l, LayerDims { k_qk: shape.d_h(), k_vo: shape.d_h(), k_ffn: shape.ffn_width });
            }
            assert_eq!(b.allocated_params, b.m1);
            assert_eq!(b.adapter_params, 0);
        }
    }

    #[test]
    fn adjusted_sparsity_example() {
        let s_hat = adjusted_sparsity(0.2, 1000, 800);
        assert!((s_hat - 0.25).abs() < 1e-15);
        assert!((2.0 * s_hat - 0.5).abs() < 1e-15);
        assert!((s_hat / 2.0 - 0.125).abs() < 1e-15);
    }

    #[test]
    fn toy_counts() {
        let t = toy();
        assert_eq!(t.total_params(), 295_488);
        assert_eq!(t.prunable_params(), 262_144);
    }

    #[test]
    fn llama_7b_sizes() {
        let shape = ModelShape::llama_7b();
        let m1 = shape.total_params() as f64;
        assert!((m1 / 1e9 - 6.74).abs() < 0.005, "{m1}");
        let b = allocate(&shape, 0.2, 0).unwrap();
        let after = b.allocated_params as f64 / 1e9;
        assert!((after - 5.39).abs() / 5.39 < 0.01, "{after}");
    }

    #[test]
    fn ffn_width_is_best_integer_width() {
        let shape = toy();
        for s in [0.1, 0.2, 0.25, 0.33] {
            let b = allocate(&shape, s, 2 * 64 * 2 * 2).unwrap();
            let l = b.per_layer[0];
            let target = (1.0 - s) * b.m1 as f64;
            // brute force every width with an explicit count of the tensors
            let dh = shape.d_h();
            let count = |w: usize| -> f64 {
                let qk = if l.k_qk == dh { 2 * 64 * dh } else { 2 * (64 * l.k_qk + l.k_qk * dh) };
                let head = qk + 2 * 64 * l.k_vo;
                let block = 64 + 64 + 4 * head + 3 * 64 * w;
                (256 * 64 + 64 * 256 + 64 + 4 * block + b.adapter_params) as f64
            };
            let best = (1..=shape.ffn_width)
                .min_by(|&a, &c| (count(a) - target).abs().total_cmp(&(count(c) - target).abs()))
                .unwrap();
            assert_eq!(l.k_ffn, best, "s = {s}");
            assert_eq!(count(l.k_ffn) as usize, b.allocated_params);
            assert!((b.achieved_sparsity() - s).abs() < 0.005);
        }
    }

    #[test]
    fn infeasible_budget_reports_maximum() {
        let shape = toy();
        let max = max_sparsity(&shape, 0);
        assert!(max > 0.3 && max < 0.5);
        match allocate(&shape, 0.6, 0) {
            Err(OlicaError::Budget { requested, max_achievable }) => {
                assert_eq!(requested, 0.6);
                assert_eq!(max_achievable, max);
            }
            other => panic!("expected budget error, got {other:?}"),
        }
        assert!(allocate(&shape, max, 0).is_ok());
        assert!(allocate(&shape, -0.1, 0).is_err());
        assert!(allocate(&shape, 1.0, 0).is_err());
    }

    proptest! {
        #[test]
        fn prop_attention_dims_monotone(a in 0.0f64..0.44, b in 0.0f64..0.44) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let shape = toy();
            let x = allocate(&shape, lo, 0).unwrap();
            let y = allocate(&shape, hi, 0).unwrap();
            prop_assert!(y.per_layer[0].k_qk <= x.per_layer[0].k_qk);
            prop_assert!(y.per_layer[0].k_vo <= x.per_layer[0].k_vo);
            // rounding the FFN width can overshoot by up to one width step
            prop_assert!(y.allocated_params <= x.allocated_params + 4 * 3 * 64);
        }

        #[test]
        fn prop_budget_accuracy(s in 0.0f64..0.44) {
            let b = allocate(&toy(), s, 0).unwrap();
            let target = (1.0 - s) * b.m1 as f64;
            prop_assert!((b.allocated_params as f64 - target).abs() <= 0.005 * target);
            prop_assert!(b.per_layer.iter().all(|l| l.k_qk >= 1 && l.k_vo >= 1 && l.k_ffn >= 1));
        }
    }
}
