//! End-to-end pruning: layer selection by MC2, then block-by-block attention
//! and FFN pruning with optional linear calibration.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::allocation::{allocate, Budget, LayerDims, ModelShape};
use crate::calibration::{adapter_rank, fit_adapter, fit_ridge, select_layers, ResidualPair};
use crate::checkpoint::{manifest_param_count, LayerMeta, Manifest, PruningMeta};
use crate::config::{Propagation, PruneConfig, VoMode};
use crate::error::{OlicaError, Result};
use crate::ffn::prune_ffn_with_norms;
use crate::mha::{prune_qk, prune_vo, HeadWeights};
use crate::model::{ffn_forward, mha_forward, mean_nll, rms_norm, AttentionHead, Block, Model, Projection};
use crate::tensor::{column_norms, Matrix};

/// `n_samples` windows of `seq_len` tokens at seeded random offsets.
pub fn sample_calibration(tokens: &[u32], n_samples: usize, seq_len: usize, seed: u64) -> Result<Vec<Vec<u32>>> {
    if seq_len == 0 || n_samples == 0 {
        return Err(OlicaError::arg("n_samples and seq_len must be >= 1"));
    }
    if tokens.len() < seq_len {
        return Err(OlicaError::arg(format!(
            "calibration corpus has {} tokens, fewer than seq_len {seq_len}",
            tokens.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let last = tokens.len() - seq_len;
    Ok((0..n_samples)
        .map(|_| {
            let start = rng.gen_range(0..=last);
            tokens[start..start + seq_len].to_vec()
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub layer: usize,
    pub mode: VoMode,
    #[serde(flatten)]
    pub dims: LayerDims,
    /// MC2 of the layer's residual measured before any pruning; used to
    /// pick the calibrated layers.
    pub mc2: f64,
    pub calibrated: bool,
    pub adapter_rank: Option<usize>,
    pub lambda: Option<f64>,
}

/// Wall-clock seconds per phase.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseTimings {
    pub mc2_prepass: f64,
    pub qk: f64,
    pub vo: f64,
    pub ffn: f64,
    pub calibration: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub requested_sparsity: f64,
    pub achieved_sparsity: f64,
    pub params_before: usize,
    pub params_after: usize,
    pub adapter_params: usize,
    pub mode: VoMode,
    pub propagate: Propagation,
    pub calibrated_layers: Vec<usize>,
    pub layers: Vec<LayerRecord>,
    pub ppl_before: Option<f64>,
    pub ppl_after: Option<f64>,
    pub timings: PhaseTimings,
}

fn ensure_dense(model: &Model) -> Result<()> {
    let cfg = &model.config;
    let dense = model.pruning.is_none()
        && model.blocks.iter().all(|b| {
            b.adapter.is_none()
                && b.ffn.width() == cfg.ffn_width
                && b.heads.iter().all(|h| {
                    matches!(h.q, Projection::Dense(_))
                        && matches!(h.k, Projection::Dense(_))
                        && h.vo_width() == cfg.d_h()
                })
        });
    if dense {
        Ok(())
    } else {
        Err(OlicaError::arg("model is already pruned; start from a dense checkpoint"))
    }
}

/// The allocation `prune_model` will use, without touching any tensor.
pub fn plan(model: &Model, config: &PruneConfig) -> Result<(Budget, usize, usize)> {
    config.validate(model.config.n_blocks)?;
    let k = if config.sparsity > 0.0 { config.calib_layers_for(model.config.n_blocks) } else { 0 };
    let r = adapter_rank(config.rank_ratio, model.config.d);
    let budget = allocate(&ModelShape::from_config(&model.config), config.sparsity, 2 * model.config.d * r * k)?;
    Ok((budget, k, r))
}

fn stack(parts: &[Matrix]) -> Matrix {
    Matrix::vcat(parts)
}

fn time<T>(acc: &mut f64, f: impl FnOnce() -> T) -> T {
    let t = Instant::now();
    let out = f();
    *acc += t.elapsed().as_secs_f64();
    out
}

/// Residual-stream states after one block, per sequence, plus the block's
/// normalized FFN inputs.
fn run_block(block: &Block, xs: &[Matrix], model: &Model) -> Result<(Vec<Matrix>, Vec<Matrix>)> {
    let mut outs = Vec::with_capacity(xs.len());
    let mut ffn_in = Vec::with_capacity(xs.len());
    for x in xs {
        let (out, acts) = block.forward_with_activations(x, &model.config)?;
        outs.push(out);
        ffn_in.push(acts.ffn_input);
    }
    Ok((outs, ffn_in))
}

/// MC2 of every FFN layer of the unpruned model, trial-pruned at the
/// allocated width with a full-rank ridge fit.
fn mc2_prepass(model: &Model, embedded: &[Matrix], budget: &Budget, lambda0: f64) -> Result<Vec<f64>> {
    let mut xs = embedded.to_vec();
    let mut out = Vec::with_capacity(model.blocks.len());
    for (l, block) in model.blocks.iter().enumerate() {
        let (next, ffn_in) = run_block(block, &xs, model)?;
        let f = stack(&ffn_in);
        let k = budget.per_layer[l].k_ffn;
        let (pruned, _) = prune_ffn_with_norms(&block.ffn, &column_norms(&f), k).map_err(|e| e.in_layer(l, None))?;
        let act = model.config.activation;
        let e = ffn_forward(&block.ffn, None, &f, act).sub(&ffn_forward(&pruned, None, &f, act));
        let fit = fit_ridge(&ResidualPair::new(f, e)?, lambda0).map_err(|e| e.in_layer(l, None))?;
        out.push(fit.mc2);
        xs = next;
    }
    Ok(out)
}

/// Prunes a dense model to `config.sparsity`, calibrating on `calib` (token
/// sequences, each at most `max_seq_len` long).
pub fn prune_model(model: &Model, config: &PruneConfig, calib: &[Vec<u32>]) -> Result<(Model, PruneReport)> {
    let started = Instant::now();
    ensure_dense(model)?;
    let (budget, k_layers, _) = plan(model, config)?;
    if calib.is_empty() {
        return Err(OlicaError::arg("calibration set is empty"));
    }
    let cfg = &model.config;
    let act = cfg.activation;
    let mut timings = PhaseTimings::default();

    let embedded = calib.iter().map(|s| model.embed_tokens(s)).collect::<Result<Vec<_>>>()?;
    let mc2s = if k_layers > 0 {
        time(&mut timings.mc2_prepass, || mc2_prepass(model, &embedded, &budget, config.lambda0))?
    } else {
        vec![0.0; cfg.n_blocks]
    };
    let selected = select_layers(&mc2s, k_layers)?;

    // `pruned_xs` runs through the pruned model, `orig_xs` through the original.
    let mut pruned_xs = embedded.clone();
    let mut orig_xs = embedded;
    let mut blocks = Vec::with_capacity(cfg.n_blocks);
    let mut records = Vec::with_capacity(cfg.n_blocks);
    for (l, block) in model.blocks.iter().enumerate() {
        let dims = budget.per_layer[l];
        let inputs = match config.propagate {
            Propagation::Pruned => &pruned_xs,
            Propagation::Unpruned => &orig_xs,
        };
        let attn_in: Vec<Matrix> = inputs.iter().map(|x| rms_norm(x, &block.attn_norm, cfg.norm_eps)).collect();
        let norms = column_norms(&stack(&attn_in));

        let dense: Vec<HeadWeights> = block.heads.iter().map(HeadWeights::from_head).collect::<Result<_>>()?;
        // Query/key and value/output are independent; time them separately.
        let qk: Vec<(Projection, Projection)> = time(&mut timings.qk, || {
            dense
                .par_iter()
                .enumerate()
                .map(|(i, h)| prune_qk(h, &norms, dims.k_qk).map_err(|e| e.in_layer(l, Some(i))))
                .collect::<Result<_>>()
        })?;
        let vo: Vec<(Matrix, Matrix)> = time(&mut timings.vo, || {
            dense
                .par_iter()
                .enumerate()
                .map(|(i, h)| prune_vo(h, &norms, dims.k_vo, config.mode).map_err(|e| e.in_layer(l, Some(i))))
                .collect::<Result<_>>()
        })?;
        let heads: Vec<AttentionHead> = qk
            .into_iter()
            .zip(vo)
            .map(|((q, k), (wv, wo))| AttentionHead { q, k, wv, wo })
            .collect();

        // FFN inputs after the (pruned or original) attention sublayer.
        let attn_heads = match config.propagate {
            Propagation::Pruned => &heads,
            Propagation::Unpruned => &block.heads,
        };
        let mut mids = Vec::with_capacity(inputs.len());
        for (x, a) in inputs.iter().zip(&attn_in) {
            mids.push(x.add(&mha_forward(attn_heads, a, cfg)?));
        }
        let ffn_in: Vec<Matrix> = mids.iter().map(|m| rms_norm(m, &block.ffn_norm, cfg.norm_eps)).collect();
        let f = stack(&ffn_in);

        let (ffn, _) = time(&mut timings.ffn, || prune_ffn_with_norms(&block.ffn, &column_norms(&f), dims.k_ffn))
            .map_err(|e| e.in_layer(l, None))?;

        let calibrate = selected.contains(&l);
        let adapter = if calibrate {
            let a = time(&mut timings.calibration, || {
                let e = ffn_forward(&block.ffn, None, &f, act).sub(&ffn_forward(&ffn, None, &f, act));
                fit_adapter(&ResidualPair::new(f.clone(), e)?, config.lambda0, config.rank_ratio, l)
            })
            .map_err(|e| e.in_layer(l, None))?;
            Some(a)
        } else {
            None
        };
        records.push(LayerRecord {
            layer: l,
            mode: config.mode,
            dims,
            mc2: mc2s[l],
            calibrated: calibrate,
            adapter_rank: adapter.as_ref().map(|a| a.rank()),
            lambda: adapter.as_ref().map(|a| a.lambda_used),
        });
        let new_block = Block {
            attn_norm: block.attn_norm.clone(),
            heads,
            ffn_norm: block.ffn_norm.clone(),
            ffn,
            adapter,
        };

        if l + 1 < cfg.n_blocks {
            match config.propagate {
                Propagation::Pruned => {
                    pruned_xs = mids
                        .iter()
                        .zip(&ffn_in)
                        .map(|(m, fi)| m.add(&ffn_forward(&new_block.ffn, new_block.adapter.as_ref(), fi, act)))
                        .collect();
                }
                Propagation::Unpruned => {
                    orig_xs = mids
                        .iter()
                        .zip(&ffn_in)
                        .map(|(m, fi)| m.add(&ffn_forward(&block.ffn, None, fi, act)))
                        .collect();
                }
            }
        }
        blocks.push(new_block);
    }

    let meta = PruningMeta {
        sparsity: config.sparsity,
        mode: config.mode,
        propagate: config.propagate,
        lambda0: config.lambda0,
        rank_ratio: config.rank_ratio,
        seed: config.seed,
        layers: records
            .iter()
            .zip(&blocks)
            .map(|(r, b)| LayerMeta {
                dims: r.dims,
                adapter_rank: r.adapter_rank,
                adapter_lambda: r.lambda,
                adapter_mc2: b.adapter.as_ref().map(|a| a.mc2),
            })
            .collect(),
    };
    let pruned = Model {
        config: cfg.clone(),
        embed: model.embed.clone(),
        blocks,
        final_norm: model.final_norm.clone(),
        proj: model.proj.clone(),
        pruning: Some(meta),
    };
    let params_before = model.param_count();
    let params_after = pruned.param_count();
    let adapter_params = pruned
        .blocks
        .iter()
        .filter_map(|b| b.adapter.as_ref())
        .map(|a| a.param_count())
        .sum();
    timings.total = started.elapsed().as_secs_f64();
    let report = PruneReport {
        requested_sparsity: config.sparsity,
        achieved_sparsity: 1.0 - params_after as f64 / params_before as f64,
        params_before,
        params_after,
        adapter_params,
        mode: config.mode,
        propagate: config.propagate,
        calibrated_layers: selected,
        layers: records,
        ppl_before: None,
        ppl_after: None,
        timings,
    };
    Ok((pruned, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub perplexity: f64,
    pub tokens: usize,
    pub seq_len: usize,
    pub seconds: f64,
}

/// Perplexity over non-overlapping windows with wall-clock time.
pub fn eval_model(model: &Model, tokens: &[u32], seq_len: usize) -> Result<EvalReport> {
    let t = Instant::now();
    let (nll, count) = mean_nll(model, tokens, seq_len)?;
    Ok(EvalReport {
        perplexity: nll.exp(),
        tokens: count,
        seq_len,
        seconds: t.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InspectLayer {
    pub layer: usize,
    pub qk_rank: Option<usize>,
    pub vo_width: usize,
    pub ffn_width: usize,
    pub adapter_rank: Option<usize>,
    pub params: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InspectReport {
    pub config: crate::model::ModelConfig,
    pub dense_params: usize,
    pub params: usize,
    pub sparsity: f64,
    pub layers: Vec<InspectLayer>,
    pub pruning: Option<PruningMeta>,
}

fn entry_len(manifest: &Manifest, name: &str) -> Option<(usize, usize)> {
    manifest.tensors.get(name).map(|e| match e.shape.as_slice() {
        [c] => (1, *c),
        [r, c] => (*r, *c),
        _ => (0, 0),
    })
}

/// Structure and size summary read from the manifest alone.
pub fn inspect(manifest: &Manifest) -> InspectReport {
    let cfg = &manifest.config;
    let h = cfg.h.max(1);
    let layers = (0..cfg.n_blocks)
        .map(|l| {
            let p = format!("blocks.{l}");
            let prefix = format!("{p}.");
            let params = manifest
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(&prefix))
                .map(|(_, e)| e.shape.iter().product::<usize>())
                .sum();
            InspectLayer {
                layer: l,
                qk_rank: entry_len(manifest, &format!("{p}.attn.wq.w1")).map(|(_, c)| c / h),
                vo_width: entry_len(manifest, &format!("{p}.attn.wv")).map_or(0, |(_, c)| c / h),
                ffn_width: entry_len(manifest, &format!("{p}.ffn.wu")).map_or(0, |(_, c)| c),
                adapter_rank: entry_len(manifest, &format!("{p}.ffn.adapter.w1")).map(|(_, c)| c),
                params,
            }
        })
        .collect();
    let dense_params = ModelShape::from_config(cfg).total_params();
    let params = manifest_param_count(manifest);
    InspectReport {
        config: cfg.clone(),
        dense_params,
        params,
        sparsity: 1.0 - params as f64 / dense_params as f64,
        layers,
        pruning: manifest.pruning.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Activation};

    fn small() -> Model {
        let cfg = ModelConfig {
            n_blocks: 2,
            d: 16,
            h: 2,
            ffn_width: 32,
            vocab_size: 16,
            activation: Activation::Silu,
            gated: true,
            rope: true,
            max_seq_len: 32,
            rope_base: 10000.0,
            norm_eps: 1e-5,
        };
        Model::random(cfg, 0).unwrap()
    }

    fn calib(n: usize) -> Vec<Vec<u32>> {
        let tokens: Vec<u32> = (0..400).map(|i| ((i * 7 + i / 3) % 16) as u32).collect();
        sample_calibration(&tokens, n, 16, 1).unwrap()
    }

    #[test]
    fn sampling_is_seeded() {
        let tokens: Vec<u32> = (0..100).collect();
        let a = sample_calibration(&tokens, 5, 10, 3).unwrap();
        assert_eq!(a, sample_calibration(&tokens, 5, 10, 3).unwrap());
        assert_ne!(a, sample_calibration(&tokens, 5, 10, 4).unwrap());
        assert!(a.iter().all(|w| w.len() == 10 && w.windows(2).all(|p| p[1] == p[0] + 1)));
        assert!(sample_calibration(&tokens[..5], 1, 10, 0).is_err());
    }

    #[test]
    fn zero_sparsity_keeps_logits() {
        let m = small();
        let (p, report) = prune_model(&m, &PruneConfig::default(), &calib(4)).unwrap();
        assert_eq!(report.params_after, report.params_before);
        assert!(report.calibrated_layers.is_empty());
        let toks: Vec<u32> = (0..20).map(|i| i % 16).collect();
        let a = m.forward(&toks).unwrap();
        let b = p.forward(&toks).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-8);
    }

    #[test]
    fn report_matches_model() {
        let m = small();
        let config = PruneConfig { sparsity: 0.2, calib_layers: Some(1), rank_ratio: 0.125, ..Default::default() };
        let (p, report) = prune_model(&m, &config, &calib(4)).unwrap();
        assert_eq!(report.params_after, p.param_count());
        assert_eq!(report.calibrated_layers.len(), 1);
        assert_eq!(report.adapter_params, 2 * 16 * 2);
        let (budget, _, _) = plan(&m, &config).unwrap();
        assert_eq!(budget.allocated_params, p.param_count());
        assert!(prune_model(&p, &config, &calib(4)).is_err());
        assert!(prune_model(&m, &config, &[]).is_err());
    }
}
