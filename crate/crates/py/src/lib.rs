//! Python bindings: the numerical kernels on NumPy arrays, plus a `Model`
//! class that loads, evaluates, prunes and saves checkpoints.

use std::path::PathBuf;

use numpy::ndarray::Array2;
use numpy::{IntoPyArray, PyArray1, PyArray2, PyReadonlyArray1, PyReadonlyArray2};
use pyo3::exceptions::{PyArithmeticError, PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use olica_core::allocation::{allocate as core_allocate, ModelShape};
use olica_core::calibration::{lambda_rule as core_lambda_rule, mc2 as core_mc2};
use olica_core::importance::{select_kept as core_select_kept, wanda_scores as core_wanda_scores};
use olica_core::mha::{fast_ond as core_fast_ond, ond as core_ond, VoFactors};
use olica_core::model::{perplexity, tokenize};
use olica_core::tensor::{
    column_norms as core_column_norms, ridge_solve as core_ridge_solve, svd as core_svd,
    truncated_factor as core_truncated_factor, weighted_factor as core_weighted_factor,
};
use olica_core::{data, load_checkpoint, prune_model, sample_calibration, save_checkpoint, Matrix, OlicaError, PruneConfig};

fn to_py(e: OlicaError) -> PyErr {
    let msg = e.to_string();
    match e.exit_code() {
        3 => PyArithmeticError::new_err(msg),
        4 => PyOSError::new_err(msg),
        _ => PyValueError::new_err(msg),
    }
}

fn matrix(a: &PyReadonlyArray2<'_, f64>) -> Matrix {
    let view = a.as_array();
    let (r, c) = view.dim();
    Matrix::from_fn(r, c, |i, j| view[[i, j]])
}

fn array<'py>(py: Python<'py>, m: Matrix) -> Bound<'py, PyArray2<f64>> {
    let shape = m.shape();
    Array2::from_shape_vec(shape, m.into_data())
        .expect("matrix data matches its shape")
        .into_pyarray(py)
}

fn vector<'py>(py: Python<'py>, v: Vec<f64>) -> Bound<'py, PyArray1<f64>> {
    v.into_pyarray(py)
}

fn json<'py>(py: Python<'py>, value: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

type Pair<'py> = (Bound<'py, PyArray2<f64>>, Bound<'py, PyArray2<f64>>);
type Svd<'py> = (Bound<'py, PyArray2<f64>>, Bound<'py, PyArray1<f64>>, Bound<'py, PyArray2<f64>>);
type Factors<'py> = (Bound<'py, PyArray2<f64>>, Bound<'py, PyArray2<f64>>, Bound<'py, PyArray1<f64>>);

fn factors(py: Python<'_>, f: VoFactors) -> Factors<'_> {
    (array(py, f.wv_hat), array(py, f.wo_hat), vector(py, f.singular_values))
}

/// Thin SVD `a = u · diag(s) · vᵀ`; returns `(u, s, v)`.
#[pyfunction]
fn svd<'py>(py: Python<'py>, a: PyReadonlyArray2<'py, f64>) -> PyResult<Svd<'py>> {
    let dec = core_svd(&matrix(&a)).map_err(to_py)?;
    Ok((array(py, dec.u), vector(py, dec.s), array(py, dec.v)))
}

/// Best rank-`r` factors `(left, right)` with `a ≈ left · rightᵀ`.
#[pyfunction]
fn truncated_factor<'py>(py: Python<'py>, a: PyReadonlyArray2<'py, f64>, r: usize) -> PyResult<Pair<'py>> {
    let (l, rt) = core_truncated_factor(&matrix(&a), r).map_err(to_py)?;
    Ok((array(py, l), array(py, rt)))
}

/// Rank-`r` `(w1, w2)` minimizing `‖(w − w1·w2)·diag(d)‖_F`.
#[pyfunction]
fn weighted_factor<'py>(
    py: Python<'py>,
    w: PyReadonlyArray2<'py, f64>,
    d: PyReadonlyArray1<'py, f64>,
    r: usize,
) -> PyResult<Pair<'py>> {
    let (w1, w2) = core_weighted_factor(&matrix(&w), &d.as_array().to_vec(), r).map_err(to_py)?;
    Ok((array(py, w1), array(py, w2)))
}

/// `(XᵀX + λI)⁻¹ XᵀE`.
#[pyfunction]
fn ridge_solve<'py>(
    py: Python<'py>,
    x: PyReadonlyArray2<'py, f64>,
    e: PyReadonlyArray2<'py, f64>,
    lam: f64,
) -> PyResult<Bound<'py, PyArray2<f64>>> {
    Ok(array(py, core_ridge_solve(&matrix(&x), &matrix(&e), lam).map_err(to_py)?))
}

#[pyfunction]
fn column_norms<'py>(py: Python<'py>, x: PyReadonlyArray2<'py, f64>) -> Bound<'py, PyArray1<f64>> {
    vector(py, core_column_norms(&matrix(&x)))
}

/// Per-entry importance `|W_ij| · ‖X_:,i‖`.
#[pyfunction]
fn wanda_scores<'py>(
    py: Python<'py>,
    x: PyReadonlyArray2<'py, f64>,
    w: PyReadonlyArray2<'py, f64>,
) -> PyResult<Bound<'py, PyArray2<f64>>> {
    Ok(array(py, core_wanda_scores(&matrix(&x), &matrix(&w)).map_err(to_py)?))
}

/// Indices of the `keep` highest scores, ascending.
#[pyfunction]
fn select_kept(scores: Vec<f64>, keep: usize) -> PyResult<Vec<usize>> {
    core_select_kept(&scores, keep).map_err(to_py)
}

/// Orthogonal neuron decomposition of one head; returns `(wv_hat, wo_hat, s)`.
#[pyfunction]
fn ond<'py>(py: Python<'py>, wv: PyReadonlyArray2<'py, f64>, wo: PyReadonlyArray2<'py, f64>) -> PyResult<Factors<'py>> {
    Ok(factors(py, core_ond(&matrix(&wv), &matrix(&wo)).map_err(to_py)?))
}

/// The SVD-of-`W_v` variant of `ond`, with the same return layout.
#[pyfunction]
fn fast_ond<'py>(py: Python<'py>, wv: PyReadonlyArray2<'py, f64>, wo: PyReadonlyArray2<'py, f64>) -> PyResult<Factors<'py>> {
    Ok(factors(py, core_fast_ond(&matrix(&wv), &matrix(&wo)).map_err(to_py)?))
}

/// `λ₀ · mean(diag(XᵀX))`.
#[pyfunction]
fn lambda_rule(x: PyReadonlyArray2<'_, f64>, lambda0: f64) -> f64 {
    core_lambda_rule(&matrix(&x), lambda0)
}

/// Mean column-wise Pearson correlation of a residual and its prediction.
#[pyfunction]
fn mc2(e: PyReadonlyArray2<'_, f64>, e_hat: PyReadonlyArray2<'_, f64>) -> PyResult<f64> {
    core_mc2(&matrix(&e), &matrix(&e_hat)).map_err(to_py)
}

/// Per-layer dimensions for a whole-model sparsity target, as a dict.
#[pyfunction]
#[pyo3(signature = (sparsity, n_blocks=4, d=64, h=4, ffn_width=256, vocab_size=256, gated=true, adapter_params=0))]
#[allow(clippy::too_many_arguments)]
fn allocate<'py>(
    py: Python<'py>,
    sparsity: f64,
    n_blocks: usize,
    d: usize,
    h: usize,
    ffn_width: usize,
    vocab_size: usize,
    gated: bool,
    adapter_params: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let shape = ModelShape { n_blocks, d, h, ffn_width, vocab_size, gated };
    json(py, &core_allocate(&shape, sparsity, adapter_params).map_err(to_py)?)
}

/// Byte-level tokens of a string.
#[pyfunction(name = "tokenize")]
fn py_tokenize(text: &str) -> Vec<u32> {
    tokenize(text)
}

/// The bundled training corpus as tokens.
#[pyfunction]
fn train_tokens() -> Vec<u32> {
    data::train_tokens()
}

/// The bundled held-out corpus as tokens.
#[pyfunction]
fn heldout_tokens() -> Vec<u32> {
    data::heldout_tokens()
}

#[pyclass(name = "Model", module = "olica")]
struct PyModel {
    inner: olica_core::Model,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(py: Python<'_>, path: PathBuf) -> PyResult<Self> {
        let inner = py.detach(|| load_checkpoint(&path)).map_err(to_py)?;
        Ok(PyModel { inner })
    }

    fn save(&self, py: Python<'_>, path: PathBuf) -> PyResult<()> {
        py.detach(|| save_checkpoint(&self.inner, &path)).map_err(to_py)
    }

    #[getter]
    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    #[getter]
    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        json(py, &self.inner.config)
    }

    /// Pruning metadata, or `None` for a dense model.
    #[getter]
    fn pruning<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        json(py, &self.inner.pruning)
    }

    /// Logits, one row per position.
    fn logits<'py>(&self, py: Python<'py>, tokens: Vec<u32>) -> PyResult<Bound<'py, PyArray2<f64>>> {
        let m = py.detach(|| self.inner.forward(&tokens)).map_err(to_py)?;
        Ok(array(py, m))
    }

    #[pyo3(signature = (tokens, seq_len=128))]
    fn perplexity(&self, py: Python<'_>, tokens: Vec<u32>, seq_len: usize) -> PyResult<f64> {
        py.detach(|| perplexity(&self.inner, &tokens, seq_len)).map_err(to_py)
    }

    /// Prunes a copy of the model. Keyword arguments are prune-config
    /// fields; `calib` is a token stream (the bundled training corpus when
    /// omitted). Returns `(pruned_model, report)`.
    #[pyo3(signature = (calib=None, **config))]
    fn prune<'py>(
        &self,
        py: Python<'py>,
        calib: Option<Vec<u32>>,
        config: Option<&Bound<'py, PyDict>>,
    ) -> PyResult<(PyModel, Bound<'py, PyAny>)> {
        let text: String = match config {
            Some(c) => py.import("json")?.call_method1("dumps", (c,))?.extract()?,
            None => "{}".into(),
        };
        let config = PruneConfig::from_json(&text).map_err(to_py)?;
        let tokens = calib.unwrap_or_else(data::train_tokens);
        let (pruned, report) = py
            .detach(|| {
                let windows = sample_calibration(&tokens, config.n_samples, config.seq_len, config.seed)?;
                prune_model(&self.inner, &config, &windows)
            })
            .map_err(to_py)?;
        Ok((PyModel { inner: pruned }, json(py, &report)?))
    }

    fn __repr__(&self) -> String {
        let c = &self.inner.config;
        format!(
            "Model(n_blocks={}, d={}, h={}, ffn_width={}, params={}, pruned={})",
            c.n_blocks,
            c.d,
            c.h,
            c.ffn_width,
            self.inner.param_count(),
            self.inner.pruning.is_some()
        )
    }
}

#[pymodule]
fn olica(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(svd, m)?)?;
    m.add_function(wrap_pyfunction!(truncated_factor, m)?)?;
    m.add_function(wrap_pyfunction!(weighted_factor, m)?)?;
    m.add_function(wrap_pyfunction!(ridge_solve, m)?)?;
    m.add_function(wrap_pyfunction!(column_norms, m)?)?;
    m.add_function(wrap_pyfunction!(wanda_scores, m)?)?;
    m.add_function(wrap_pyfunction!(select_kept, m)?)?;
    m.add_function(wrap_pyfunction!(ond, m)?)?;
    m.add_function(wrap_pyfunction!(fast_ond, m)?)?;
    m.add_function(wrap_pyfunction!(lambda_rule, m)?)?;
    m.add_function(wrap_pyfunction!(mc2, m)?)?;
    m.add_function(wrap_pyfunction!(allocate, m)?)?;
    m.add_function(wrap_pyfunction!(py_tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(train_tokens, m)?)?;
    m.add_function(wrap_pyfunction!(heldout_tokens, m)?)?;
    Ok(())
}
