//! Dense row-major matrices and the decompositions built on them.
//!
//! Everything is computed in `f64`. The SVD is delegated to `faer`; the ridge
//! solve is a plain Cholesky factorization of the regularized normal
//! equations.

use std::fmt;
use std::ops::{Index, IndexMut};

use crate::error::{OlicaError, Result};

#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix({}x{})", self.rows, self.cols)?;
        if self.data.len() <= 64 {
            f.debug_list().entries(self.data.chunks(self.cols.max(1))).finish()?;
        }
        Ok(())
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(OlicaError::arg(format!(
                "matrix data has {} values, expected {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    /// Builds a matrix from equal-length rows. Panics on ragged input.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Matrix {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Matrix::zeros(values.len(), values.len());
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    /// `self · other`
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(
            self.cols, other.rows,
            "matmul shape mismatch: {}x{} · {}x{}",
            self.rows, self.cols, other.rows, other.cols
        );
        if use_blocked(self.rows, self.cols, other.cols) {
            return Matrix::from_faer((self.view() * other.view()).as_ref());
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        let n = other.cols;
        for i in 0..self.rows {
            let a_row = self.row(i);
            let o_row = &mut out.data[i * n..(i + 1) * n];
            for (k, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * n..(k + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self · otherᵀ`
    pub fn matmul_t(&self, other: &Matrix) -> Matrix {
        assert_eq!(
            self.cols, other.cols,
            "matmul_t shape mismatch: {}x{} · ({}x{})ᵀ",
            self.rows, self.cols, other.rows, other.cols
        );
        if use_blocked(self.rows, self.cols, other.rows) {
            return Matrix::from_faer((self.view() * other.view().transpose()).as_ref());
        }
        Matrix::from_fn(self.rows, other.rows, |i, j| dot(self.row(i), other.row(j)))
    }

    /// `selfᵀ · other`
    pub fn t_matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(
            self.rows, other.rows,
            "t_matmul shape mismatch: ({}x{})ᵀ · {}x{}",
            self.rows, self.cols, other.rows, other.cols
        );
        if use_blocked(self.cols, self.rows, other.cols) {
            return Matrix::from_faer((self.view().transpose() * other.view()).as_ref());
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        let n = other.cols;
        for k in 0..self.rows {
            let a_row = self.row(k);
            let b_row = other.row(k);
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let o_row = &mut out.data[i * n..(i + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&self, c: f64) -> Matrix {
        self.map(|v| v * c)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
        assert_eq!(self.shape(), other.shape(), "elementwise shape mismatch");
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// Multiplies column `j` by `factors[j]`, i.e. `self · diag(factors)`.
    pub fn scale_columns(&self, factors: &[f64]) -> Matrix {
        assert_eq!(factors.len(), self.cols);
        let mut out = self.clone();
        for row in out.data.chunks_mut(self.cols.max(1)) {
            for (v, f) in row.iter_mut().zip(factors) {
                *v *= f;
            }
        }
        out
    }

    /// Multiplies row `i` by `factors[i]`, i.e. `diag(factors) · self`.
    pub fn scale_rows(&self, factors: &[f64]) -> Matrix {
        assert_eq!(factors.len(), self.rows);
        let mut out = self.clone();
        for (row, f) in out.data.chunks_mut(self.cols.max(1)).zip(factors) {
            for v in row {
                *v *= f;
            }
        }
        out
    }

    /// Keeps the listed columns, in the order given.
    pub fn select_columns(&self, idx: &[usize]) -> Matrix {
        Matrix::from_fn(self.rows, idx.len(), |i, j| self[(i, idx[j])])
    }

    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    /// Columns `start..end`.
    pub fn column_block(&self, start: usize, end: usize) -> Matrix {
        Matrix::from_fn(self.rows, end - start, |i, j| self[(i, start + j)])
    }

    pub fn row_block(&self, start: usize, end: usize) -> Matrix {
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Concatenates matrices side by side. All must share a row count.
    pub fn hcat(parts: &[Matrix]) -> Matrix {
        let rows = parts.first().map_or(0, |p| p.rows);
        assert!(parts.iter().all(|p| p.rows == rows), "hcat row mismatch");
        let cols = parts.iter().map(|p| p.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(i));
            }
        }
        Matrix { rows, cols, data }
    }

    /// Stacks matrices on top of each other. All must share a column count.
    pub fn vcat(parts: &[Matrix]) -> Matrix {
        let cols = parts.first().map_or(0, |p| p.cols);
        assert!(parts.iter().all(|p| p.cols == cols), "vcat column mismatch");
        let rows = parts.iter().map(|p| p.rows).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Matrix { rows, cols, data }
    }

    /// Appends the rows of `other` below `self`.
    pub fn append_rows(&mut self, other: &Matrix) {
        assert_eq!(self.cols, other.cols, "append_rows column mismatch");
        self.data.extend_from_slice(&other.data);
        self.rows += other.rows;
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// `‖self − other‖_F / ‖other‖_F`, or the absolute difference when
    /// `other` is zero.
    pub fn rel_diff(&self, other: &Matrix) -> f64 {
        let num = self.sub(other).frobenius_norm();
        let den = other.frobenius_norm();
        if den == 0.0 {
            num
        } else {
            num / den
        }
    }

    fn view(&self) -> faer::MatRef<'_, f64> {
        faer::MatRef::from_row_major_slice(&self.data, self.rows, self.cols)
    }

    fn to_faer(&self) -> faer::Mat<f64> {
        faer::Mat::from_fn(self.rows, self.cols, |i, j| self[(i, j)])
    }

    /// Every faer result passes through here, so this is also where the
    /// vector state its kernels leave behind gets cleared.
    fn from_faer(m: faer::MatRef<'_, f64>) -> Matrix {
        clear_upper_vector_state();
        Matrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
    }
}

/// faer's AVX kernels return with the upper vector halves dirty, after which
/// every SSE-encoded libm call (`exp`, `tanh`) pays a transition penalty of
/// roughly 30x on some Intel parts.
#[inline]
fn clear_upper_vector_state() {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx") {
        // SAFETY: `vzeroupper` exists whenever AVX does and only zeroes the
        // upper halves of the vector registers, which no live Rust value uses
        // across this call.
        unsafe { std::arch::asm!("vzeroupper", options(nomem, nostack, preserves_flags)) };
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

#[inline]
/// Large products go through faer's blocked kernels; small ones stay on the
/// simple loops.
fn use_blocked(m: usize, k: usize, n: usize) -> bool {
    m * k * n >= 1 << 22 && m.min(k).min(n) >= 8
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Thin singular value decomposition `a = u · diag(s) · vᵀ`.
#[derive(Debug, Clone)]
pub struct SvdResult {
    /// m×k, orthonormal columns
    pub u: Matrix,
    /// length k, nonincreasing, nonnegative
    pub s: Vec<f64>,
    /// n×k, orthonormal columns
    pub v: Matrix,
}

impl SvdResult {
    pub fn rank(&self) -> usize {
        self.s.len()
    }

    pub fn reconstruct(&self) -> Matrix {
        self.u.scale_columns(&self.s).matmul_t(&self.v)
    }
}

/// Thin SVD with `k = min(rows, cols)`.
///
/// Each column of `u` is sign-normalized so that its largest-magnitude entry
/// is nonnegative (the matching column of `v` flips with it). Ties among equal
/// singular values keep the solver's order.
pub fn svd(a: &Matrix) -> Result<SvdResult> {
    let (m, n) = a.shape();
    if m == 0 || n == 0 {
        return Err(OlicaError::arg(format!("cannot decompose an empty {m}x{n} matrix")));
    }
    if !a.is_finite() {
        return Err(OlicaError::arg(format!(
            "cannot decompose a {m}x{n} matrix with non-finite entries"
        )));
    }
    let dec = a
        .to_faer()
        .thin_svd()
        .map_err(|_| OlicaError::Decomposition { rows: m, cols: n })?;
    let mut u = Matrix::from_faer(dec.U());
    let mut v = Matrix::from_faer(dec.V());
    let sv = dec.S().column_vector();
    let s: Vec<f64> = (0..sv.nrows()).map(|i| sv[i].max(0.0)).collect();
    if s.iter().any(|x| !x.is_finite()) {
        return Err(OlicaError::Decomposition { rows: m, cols: n });
    }

    for j in 0..s.len() {
        let mut pivot = 0.0f64;
        for i in 0..m {
            if u[(i, j)].abs() > pivot.abs() {
                pivot = u[(i, j)];
            }
        }
        if pivot < 0.0 {
            for i in 0..m {
                u[(i, j)] = -u[(i, j)];
            }
            for i in 0..n {
                v[(i, j)] = -v[(i, j)];
            }
        }
    }
    Ok(SvdResult { u, s, v })
}

/// Best rank-`r` factorization `a ≈ left · rightᵀ` with `left = U_r Σ_r` and
/// `right = V_r`.
pub fn truncated_factor(a: &Matrix, r: usize) -> Result<(Matrix, Matrix)> {
    let k = a.rows().min(a.cols());
    if r == 0 || r > k {
        return Err(OlicaError::arg(format!(
            "rank {r} out of range 1..={k} for a {}x{} matrix",
            a.rows(),
            a.cols()
        )));
    }
    let dec = svd(a)?;
    let left = dec.u.column_block(0, r).scale_columns(&dec.s[..r]);
    let right = dec.v.column_block(0, r);
    Ok((left, right))
}

/// Rank-`r` factorization `w ≈ w1 · w2` minimizing `‖(w − w1·w2)·D‖_F` for
/// `D = diag(d_diag)`, where `d_diag` weights the columns of `w`.
///
/// Returns `w1` (rows × r) and `w2` (r × cols).
pub fn weighted_factor(w: &Matrix, d_diag: &[f64], r: usize) -> Result<(Matrix, Matrix)> {
    if d_diag.len() != w.cols() {
        return Err(OlicaError::arg(format!(
            "weight vector has length {}, matrix has {} columns",
            d_diag.len(),
            w.cols()
        )));
    }
    if let Some((i, v)) = d_diag
        .iter()
        .enumerate()
        .find(|(_, v)| !(v.is_finite() && **v > 0.0))
    {
        return Err(OlicaError::arg(format!(
            "weight {i} is {v}; all weights must be finite and positive"
        )));
    }
    let (left, right) = truncated_factor(&w.scale_columns(d_diag), r)?;
    let inv: Vec<f64> = d_diag.iter().map(|d| 1.0 / d).collect();
    let w2 = right.transpose().scale_columns(&inv);
    Ok((left, w2))
}

/// Closed-form ridge regression `(XᵀX + λI)⁻¹ XᵀE`.
///
/// The regularized Gram matrix is Cholesky-factored; a pivot that is not
/// clearly positive relative to the Gram diagonal is reported as
/// [`OlicaError::Singular`].
pub fn ridge_solve(x: &Matrix, e: &Matrix, lambda: f64) -> Result<Matrix> {
    if x.rows() != e.rows() {
        return Err(OlicaError::arg(format!(
            "design has {} rows but targets have {}",
            x.rows(),
            e.rows()
        )));
    }
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(OlicaError::arg(format!("lambda must be finite and >= 0, got {lambda}")));
    }
    let d = x.cols();
    let mut gram = x.t_matmul(x);
    for i in 0..d {
        gram[(i, i)] += lambda;
    }
    let rhs = x.t_matmul(e);
    let l = cholesky(&gram).ok_or(OlicaError::Singular { lambda })?;
    Ok(cholesky_solve(&l, &rhs))
}

/// Lower-triangular Cholesky factor, or `None` when the matrix is not
/// numerically positive definite.
fn cholesky(a: &Matrix) -> Option<Matrix> {
    let n = a.rows();
    let scale = (0..n).map(|i| a[(i, i)].abs()).fold(0.0, f64::max);
    let tol = scale * 1e-12;
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut diag = a[(j, j)];
        for k in 0..j {
            diag -= l[(j, k)] * l[(j, k)];
        }
        if diag.is_nan() || diag <= tol {
            return None;
        }
        let ljj = diag.sqrt();
        l[(j, j)] = ljj;
        for i in j + 1..n {
            let mut v = a[(i, j)];
            for k in 0..j {
                v -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = v / ljj;
        }
    }
    Some(l)
}

fn cholesky_solve(l: &Matrix, b: &Matrix) -> Matrix {
    let n = l.rows();
    let mut x = b.clone();
    for c in 0..b.cols() {
        // L y = b
        for i in 0..n {
            let mut v = x[(i, c)];
            for k in 0..i {
                v -= l[(i, k)] * x[(k, c)];
            }
            x[(i, c)] = v / l[(i, i)];
        }
        // Lᵀ x = y
        for i in (0..n).rev() {
            let mut v = x[(i, c)];
            for k in i + 1..n {
                v -= l[(k, i)] * x[(k, c)];
            }
            x[(i, c)] = v / l[(i, i)];
        }
    }
    x
}

/// Euclidean norm of every column.
pub fn column_norms(x: &Matrix) -> Vec<f64> {
    let mut acc = vec![0.0; x.cols()];
    for i in 0..x.rows() {
        for (a, v) in acc.iter_mut().zip(x.row(i)) {
            *a += v * v;
        }
    }
    acc.into_iter().map(f64::sqrt).collect()
}
