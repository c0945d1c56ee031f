//! Linear calibration of pruned FFN layers.
//!
//! The residual `E = f(X) − f̂(X)` of a pruned layer is regressed on the
//! layer input with a ridge penalty, the solution is truncated to rank `r`,
//! and the resulting pair is added back as `X·w1·w2ᵀ`. Layers are chosen by
//! how well a linear model explains their residual (mean column-wise Pearson
//! correlation, "MC2").

use crate::error::{OlicaError, Result};
use crate::tensor::{column_norms, ridge_solve, truncated_factor, Matrix};

/// Layer inputs and the residual they should explain; both n×d.
#[derive(Debug, Clone)]
pub struct ResidualPair {
    pub x: Matrix,
    pub e: Matrix,
}

impl ResidualPair {
    pub fn new(x: Matrix, e: Matrix) -> Result<Self> {
        if x.shape() != e.shape() {
            return Err(OlicaError::arg(format!(
                "inputs {:?} and residual {:?} differ in shape",
                x.shape(),
                e.shape()
            )));
        }
        Ok(ResidualPair { x, e })
    }
}

/// Calibration term `X·w1·w2ᵀ` attached to one pruned FFN layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankAdapter {
    /// d×r
    pub w1: Matrix,
    /// d×r
    pub w2: Matrix,
    pub layer_index: usize,
    pub lambda_used: f64,
    pub mc2: f64,
}

impl LowRankAdapter {
    pub fn rank(&self) -> usize {
        self.w1.cols()
    }

    /// Always `2·d·r`.
    pub fn param_count(&self) -> usize {
        self.w1.rows() * self.w1.cols() + self.w2.rows() * self.w2.cols()
    }

    pub fn apply(&self, x: &Matrix) -> Matrix {
        x.matmul(&self.w1).matmul_t(&self.w2)
    }
}

/// Full-rank ridge fit of a residual pair.
#[derive(Debug, Clone)]
pub struct RidgeFit {
    pub w: Matrix,
    pub lambda: f64,
    pub mc2: f64,
}

pub fn residual(full_out: &Matrix, pruned_out: &Matrix) -> Result<Matrix> {
    if full_out.shape() != pruned_out.shape() {
        return Err(OlicaError::arg(format!(
            "output shapes differ: {:?} vs {:?}",
            full_out.shape(),
            pruned_out.shape()
        )));
    }
    Ok(full_out.sub(pruned_out))
}

/// `λ = λ₀ · mean(diag(XᵀX))`.
pub fn lambda_rule(x: &Matrix, lambda0: f64) -> f64 {
    let norms = column_norms(x);
    if norms.is_empty() {
        return 0.0;
    }
    lambda0 * norms.iter().map(|n| n * n).sum::<f64>() / norms.len() as f64
}

/// Mean over columns of the Pearson correlation between `e` and `e_hat`.
///
/// A column where either side is constant contributes 0. The result is
/// clamped into [−1, 1].
pub fn mc2(e: &Matrix, e_hat: &Matrix) -> Result<f64> {
    if e.shape() != e_hat.shape() {
        return Err(OlicaError::arg(format!(
            "residual {:?} and prediction {:?} differ in shape",
            e.shape(),
            e_hat.shape()
        )));
    }
    let (n, d) = e.shape();
    if n < 2 {
        return Err(OlicaError::arg(format!("MC2 needs at least 2 rows, got {n}")));
    }
    if d == 0 {
        return Err(OlicaError::arg("MC2 of an empty residual"));
    }
    let mean = |m: &Matrix| -> Vec<f64> {
        let mut acc = vec![0.0; d];
        for i in 0..n {
            for (a, v) in acc.iter_mut().zip(m.row(i)) {
                *a += v;
            }
        }
        acc.into_iter().map(|a| a / n as f64).collect()
    };
    let (me, mh) = (mean(e), mean(e_hat));
    let mut cov = vec![0.0; d];
    let mut ve = vec![0.0; d];
    let mut vh = vec![0.0; d];
    let mut scale_e = vec![0.0f64; d];
    let mut scale_h = vec![0.0f64; d];
    for i in 0..n {
        for j in 0..d {
            let a = e[(i, j)] - me[j];
            let b = e_hat[(i, j)] - mh[j];
            cov[j] += a * b;
            ve[j] += a * a;
            vh[j] += b * b;
            scale_e[j] = scale_e[j].max(e[(i, j)].abs());
            scale_h[j] = scale_h[j].max(e_hat[(i, j)].abs());
        }
    }
    // Rounding noise from the mean of a constant column must not count as variance.
    let flat = |var: f64, scale: f64| var <= n as f64 * (1e-12 * scale).powi(2);
    let mut total = 0.0;
    for j in 0..d {
        if flat(ve[j], scale_e[j]) || flat(vh[j], scale_h[j]) {
            continue;
        }
        total += (cov[j] / (ve[j] * vh[j]).sqrt()).clamp(-1.0, 1.0);
    }
    Ok((total / d as f64).clamp(-1.0, 1.0))
}

/// Ridge solution with the activation-scaled penalty and its MC2.
pub fn fit_ridge(pair: &ResidualPair, lambda0: f64) -> Result<RidgeFit> {
    if !(lambda0.is_finite() && lambda0 >= 0.0) {
        return Err(OlicaError::arg(format!("lambda0 must be >= 0, got {lambda0}")));
    }
    let lambda = lambda_rule(&pair.x, lambda0);
    let w = ridge_solve(&pair.x, &pair.e, lambda)?;
    let mc2 = mc2(&pair.e, &pair.x.matmul(&w))?;
    Ok(RidgeFit { w, lambda, mc2 })
}

/// Adapter rank `max(1, round(rank_ratio·d))`, capped at `d`.
pub fn adapter_rank(rank_ratio: f64, d: usize) -> usize {
    ((rank_ratio * d as f64).round() as usize).clamp(1, d.max(1))
}

/// Fits the ridge solution and truncates it to the adapter rank. The stored
/// MC2 is that of the full-rank prediction.
pub fn fit_adapter(
    pair: &ResidualPair,
    lambda0: f64,
    rank_ratio: f64,
    layer_index: usize,
) -> Result<LowRankAdapter> {
    if !(rank_ratio > 0.0 && rank_ratio <= 1.0) {
        return Err(OlicaError::arg(format!("rank ratio must be in (0, 1], got {rank_ratio}")));
    }
    let fit = fit_ridge(pair, lambda0)?;
    let r = adapter_rank(rank_ratio, pair.x.cols());
    adapter_from_fit(&fit, r, layer_index)
}

/// Truncates an existing ridge fit to rank `r`.
pub fn adapter_from_fit(fit: &RidgeFit, r: usize, layer_index: usize) -> Result<LowRankAdapter> {
    let (w1, w2) = truncated_factor(&fit.w, r)?;
    Ok(LowRankAdapter {
        w1,
        w2,
        layer_index,
        lambda_used: fit.lambda,
        mc2: fit.mc2,
    })
}

/// The `k` layers with the highest MC2 (ties to the lower index), ascending.
pub fn select_layers(mc2_by_layer: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > mc2_by_layer.len() {
        return Err(OlicaError::arg(format!(
            "cannot calibrate {k} of {} layers",
            mc2_by_layer.len()
        )));
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    crate::importance::select_kept(mc2_by_layer, k)
}
