//! Per-head attention decomposition: orthogonal neuron decomposition of the
//! value–output product and weighted low-rank factorization of query/key.

use serde::{Deserialize, Serialize};

use crate::error::{OlicaError, Result};
use crate::importance::{neuron_scores, select_kept, wanda_from_norms, NeuronKind};
use crate::model::{AttentionHead, Projection};
use crate::tensor::{svd, weighted_factor, Matrix};

/// How the value/output pair of each head is restructured before pruning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VoMode {
    /// SVD of the d×d product `W_v·W_oᵀ`.
    Ond,
    /// SVD of `W_v` alone; same product, much cheaper.
    #[default]
    FastOnd,
    /// No decomposition: prune the raw value/output columns.
    WandaOnly,
    /// Activation-weighted SVD of `W_v`, truncated by singular value.
    Awsvd,
}

impl VoMode {
    pub fn as_str(self) -> &'static str {
        match self {
            VoMode::Ond => "ond",
            VoMode::FastOnd => "fast_ond",
            VoMode::WandaOnly => "wanda_only",
            VoMode::Awsvd => "awsvd",
        }
    }
}

impl std::str::FromStr for VoMode {
    type Err = OlicaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ond" => Ok(VoMode::Ond),
            "fast_ond" => Ok(VoMode::FastOnd),
            "wanda_only" => Ok(VoMode::WandaOnly),
            "awsvd" => Ok(VoMode::Awsvd),
            other => Err(OlicaError::arg(format!(
                "unknown mode `{other}` (expected ond, fast_ond, wanda_only or awsvd)"
            ))),
        }
    }
}

/// Dense weights of one attention head, each d×d_h.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
}

impl HeadWeights {
    pub fn new(wq: Matrix, wk: Matrix, wv: Matrix, wo: Matrix) -> Result<Self> {
        let shape = wq.shape();
        if [&wk, &wv, &wo].iter().any(|m| m.shape() != shape) {
            return Err(OlicaError::arg(format!(
                "head matrices disagree in shape: q {:?}, k {:?}, v {:?}, o {:?}",
                shape,
                wk.shape(),
                wv.shape(),
                wo.shape()
            )));
        }
        Ok(HeadWeights { wq, wk, wv, wo })
    }

    /// The dense head from a model head; fails on already factored q/k.
    pub fn from_head(head: &AttentionHead) -> Result<Self> {
        match (&head.q, &head.k) {
            (Projection::Dense(q), Projection::Dense(k)) => {
                HeadWeights::new(q.clone(), k.clone(), head.wv.clone(), head.wo.clone())
            }
            _ => Err(OlicaError::arg("head is already factored")),
        }
    }

    pub fn d(&self) -> usize {
        self.wq.rows()
    }

    pub fn d_h(&self) -> usize {
        self.wq.cols()
    }
}

/// Decomposed value/output factors together with the singular values that
/// produced them.
#[derive(Debug, Clone)]
pub struct VoFactors {
    pub wv_hat: Matrix,
    pub wo_hat: Matrix,
    pub singular_values: Vec<f64>,
}

fn check_pair(wv: &Matrix, wo: &Matrix) -> Result<()> {
    if wv.shape() != wo.shape() {
        return Err(OlicaError::arg(format!(
            "value {:?} and output {:?} shapes differ",
            wv.shape(),
            wo.shape()
        )));
    }
    if wv.cols() > wv.rows() {
        return Err(OlicaError::arg(format!(
            "head dimension {} exceeds model dimension {}",
            wv.cols(),
            wv.rows()
        )));
    }
    Ok(())
}

/// SVD of the product `W_v·W_oᵀ = UΣVᵀ` restricted to its leading d_h
/// directions: `Ŵ_v = U·Σ`, `Ŵ_o = V`.
pub fn ond(wv: &Matrix, wo: &Matrix) -> Result<VoFactors> {
    check_pair(wv, wo)?;
    let dh = wv.cols();
    let dec = svd(&wv.matmul_t(wo))?;
    let s = dec.s[..dh].to_vec();
    Ok(VoFactors {
        wv_hat: dec.u.column_block(0, dh).scale_columns(&s),
        wo_hat: dec.v.column_block(0, dh),
        singular_values: s,
    })
}

/// SVD of `W_v = UΣVᵀ` alone: `Ŵ_v = U`, `Ŵ_o = W_o·V·Σ`.
pub fn fast_ond(wv: &Matrix, wo: &Matrix) -> Result<VoFactors> {
    check_pair(wv, wo)?;
    let dec = svd(wv)?;
    Ok(VoFactors {
        wo_hat: wo.matmul(&dec.v).scale_columns(&dec.s),
        wv_hat: dec.u,
        singular_values: dec.s,
    })
}

/// Fast-OND on the activation-weighted value matrix: `D·W_v = UΣVᵀ`,
/// `Ŵ_v = D⁻¹U`, `Ŵ_o = W_o·V·Σ`.
pub fn weighted_fast_ond(wv: &Matrix, wo: &Matrix, norms: &[f64]) -> Result<VoFactors> {
    check_pair(wv, wo)?;
    if norms.len() != wv.rows() {
        return Err(OlicaError::arg(format!(
            "{} activation norms for a {}-row value matrix",
            norms.len(),
            wv.rows()
        )));
    }
    let dd = clamp_norms(norms);
    let dec = svd(&wv.scale_rows(&dd))?;
    let inv: Vec<f64> = dd.iter().map(|v| 1.0 / v).collect();
    Ok(VoFactors {
        wv_hat: dec.u.scale_rows(&inv),
        wo_hat: wo.matmul(&dec.v).scale_columns(&dec.s),
        singular_values: dec.s,
    })
}

/// Keeps the `keep` eigen-neurons (column pairs) with the highest summed
/// activation-weighted magnitude over both factors. `norms` are the column
/// norms of the head's input activations. Returns the slim factors and the
/// kept indices.
pub fn prune_head_vo(wv_hat: &Matrix, wo_hat: &Matrix, norms: &[f64], keep: usize) -> Result<(Matrix, Matrix, Vec<usize>)> {
    check_pair(wv_hat, wo_hat)?;
    if norms.len() != wv_hat.rows() {
        return Err(OlicaError::arg(format!(
            "{} activation norms for a {}-row value matrix",
            norms.len(),
            wv_hat.rows()
        )));
    }
    if keep == 0 {
        return Err(OlicaError::arg("a head must keep at least one value/output dimension"));
    }
    let sv = wanda_from_norms(norms, wv_hat);
    let so = wanda_from_norms(norms, wo_hat);
    let scores = neuron_scores(&[&sv, &so], NeuronKind::MhaEigenNeuron)?;
    let kept = select_kept(&scores.scores, keep)?;
    Ok((wv_hat.select_columns(&kept), wo_hat.select_columns(&kept), kept))
}

/// Replaces zero (or denormal-small) activation norms by `1e-12 · max` so
/// that the weighting stays invertible; all-zero norms become all ones.
pub fn clamp_norms(norms: &[f64]) -> Vec<f64> {
    let max = norms.iter().cloned().fold(0.0, f64::max);
    if max <= 0.0 || !max.is_finite() {
        return vec![1.0; norms.len()];
    }
    let floor = 1e-12 * max;
    norms.iter().map(|&v| if v > floor { v } else { floor }).collect()
}

/// Rank-`keep` factorization `W ≈ left·right` of one d×d_h query or key
/// matrix minimizing `‖D·(W − left·right)‖_F`, `D = diag(norms)`. Without
/// norms the weighting is the identity.
pub fn factor_projection(w: &Matrix, norms: Option<&[f64]>, keep: usize) -> Result<Projection> {
    let d = w.rows();
    let weights = match norms {
        Some(n) if n.len() != d => {
            return Err(OlicaError::arg(format!("{} activation norms for a {d}-row matrix", n.len())));
        }
        Some(n) => clamp_norms(n),
        None => vec![1.0; d],
    };
    // Wᵀ ≈ w1·w2 with the weighting on the columns of Wᵀ, i.e. the rows of W.
    let (w1, w2) = weighted_factor(&w.transpose(), &weights, keep)?;
    Ok(Projection::LowRank {
        left: w2.transpose(),
        right: w1.transpose(),
    })
}

/// Independent weighted factorizations of a head's query and key matrices.
/// Rotary embeddings sit between the two, so their product is not factored.
pub fn factor_qk(wq: &Matrix, wk: &Matrix, norms: Option<&[f64]>, keep: usize) -> Result<(Projection, Projection)> {
    Ok((factor_projection(wq, norms, keep)?, factor_projection(wk, norms, keep)?))
}

/// Value/output factors for `mode` before eigen-neuron pruning.
pub fn decompose_vo(wv: &Matrix, wo: &Matrix, norms: &[f64], mode: VoMode) -> Result<VoFactors> {
    match mode {
        VoMode::Ond => ond(wv, wo),
        VoMode::FastOnd => fast_ond(wv, wo),
        VoMode::Awsvd => weighted_fast_ond(wv, wo, norms),
        VoMode::WandaOnly => {
            check_pair(wv, wo)?;
            Ok(VoFactors {
                wv_hat: wv.clone(),
                wo_hat: wo.clone(),
                singular_values: Vec::new(),
            })
        }
    }
}

fn check_keep(k: usize, dh: usize, what: &str) -> Result<()> {
    if k == 0 || k > dh {
        return Err(OlicaError::arg(format!("{what} keep {k} out of range 1..={dh}")));
    }
    Ok(())
}

/// Query/key of one head at rank `k_qk`; `k_qk == d_h` leaves them dense.
pub fn prune_qk(head: &HeadWeights, norms: &[f64], k_qk: usize) -> Result<(Projection, Projection)> {
    check_keep(k_qk, head.d_h(), "query/key")?;
    if k_qk == head.d_h() {
        return Ok((Projection::Dense(head.wq.clone()), Projection::Dense(head.wk.clone())));
    }
    factor_qk(&head.wq, &head.wk, Some(norms), k_qk)
}

/// Value/output of one head at width `k_vo`. AWSVD keeps the leading
/// weighted singular directions; the other modes rank eigen-neurons by
/// activation-weighted magnitude.
pub fn prune_vo(head: &HeadWeights, norms: &[f64], k_vo: usize, mode: VoMode) -> Result<(Matrix, Matrix)> {
    check_keep(k_vo, head.d_h(), "value/output")?;
    let factors = decompose_vo(&head.wv, &head.wo, norms, mode)?;
    if mode == VoMode::Awsvd {
        return Ok((factors.wv_hat.column_block(0, k_vo), factors.wo_hat.column_block(0, k_vo)));
    }
    let (wv, wo, _) = prune_head_vo(&factors.wv_hat, &factors.wo_hat, norms, k_vo)?;
    Ok((wv, wo))
}

/// Prunes one head to `k_qk` query/key rank and `k_vo` value/output width.
pub fn prune_head(head: &HeadWeights, norms: &[f64], k_qk: usize, k_vo: usize, mode: VoMode) -> Result<AttentionHead> {
    check_keep(k_vo, head.d_h(), "value/output")?;
    let (q, k) = prune_qk(head, norms, k_qk)?;
    let (wv, wo) = prune_vo(head, norms, k_vo, mode)?;
    Ok(AttentionHead { q, k, wv, wo })
}
