//! Reference computations used by the tests.
//!
//! These deliberately avoid the crate's `Matrix` type and decompositions:
//! plain nested vectors, scalar loops, Jacobi rotations and Gauss-Jordan
//! elimination.
#![allow(dead_code, clippy::needless_range_loop)]

pub type Rows = Vec<Vec<f64>>;

pub fn to_rows(data: &[f64], rows: usize, cols: usize) -> Rows {
    assert_eq!(data.len(), rows * cols);
    data.chunks(cols).map(|c| c.to_vec()).collect()
}

pub fn transpose(a: &Rows) -> Rows {
    let (m, n) = (a.len(), a[0].len());
    (0..n).map(|j| (0..m).map(|i| a[i][j]).collect()).collect()
}

pub fn matmul(a: &Rows, b: &Rows) -> Rows {
    let (m, k, n) = (a.len(), b.len(), b[0].len());
    assert_eq!(a[0].len(), k);
    let mut out = vec![vec![0.0; n]; m];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for t in 0..k {
                acc += a[i][t] * b[t][j];
            }
            out[i][j] = acc;
        }
    }
    out
}

/// `aᵀ a`
pub fn gram(a: &Rows) -> Rows {
    matmul(&transpose(a), a)
}

pub fn frobenius(a: &Rows) -> f64 {
    a.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn sub(a: &Rows, b: &Rows) -> Rows {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p - q).collect())
        .collect()
}

/// Closed-form eigenvalues of a symmetric 2x2 matrix, larger first.
pub fn sym2_eigenvalues(a: &Rows) -> (f64, f64) {
    let half_trace = 0.5 * (a[0][0] + a[1][1]);
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    let disc = (half_trace * half_trace - det).max(0.0).sqrt();
    (half_trace + disc, half_trace - disc)
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
pub fn jacobi_eigenvalues(a: &Rows) -> Vec<f64> {
    jacobi_eigh(a).0
}

/// Eigenvalues and eigenvectors (as columns, unsorted) of a symmetric
/// matrix by cyclic Jacobi rotations.
pub fn jacobi_eigh(a: &Rows) -> (Vec<f64>, Rows) {
    let n = a.len();
    let mut m = a.clone();
    let mut vecs: Rows = (0..n).map(|i| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i][j] * m[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if m[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k][p];
                    let mkq = m[k][q];
                    m[k][p] = c * mkp - s * mkq;
                    m[k][q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p][k];
                    let mqk = m[q][k];
                    m[p][k] = c * mpk - s * mqk;
                    m[q][k] = s * mpk + c * mqk;
                }
                for row in vecs.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    ((0..n).map(|i| m[i][i]).collect(), vecs)
}

/// Singular values via Jacobi eigenvalues of the Gram matrix, descending.
pub fn singular_values(a: &Rows) -> Vec<f64> {
    let g = if a.len() >= a[0].len() {
        gram(a)
    } else {
        gram(&transpose(a))
    };
    let mut s: Vec<f64> = jacobi_eigenvalues(&g)
        .into_iter()
        .map(|l| l.max(0.0).sqrt())
        .collect();
    s.sort_by(|x, y| y.partial_cmp(x).unwrap());
    s
}

/// Inverse by Gauss-Jordan elimination with partial pivoting.
pub fn inverse(a: &Rows) -> Rows {
    let n = a.len();
    let mut aug: Rows = a
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let mut row = r.clone();
            row.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            row
        })
        .collect();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&x, &y| aug[x][col].abs().partial_cmp(&aug[y][col].abs()).unwrap())
            .unwrap();
        aug.swap(col, pivot);
        let p = aug[col][col];
        assert!(p.abs() > 1e-300, "singular matrix in oracle");
        for v in aug[col].iter_mut() {
            *v /= p;
        }
        for r in 0..n {
            if r != col {
                let f = aug[r][col];
                if f != 0.0 {
                    for c in 0..2 * n {
                        aug[r][c] -= f * aug[col][c];
                    }
                }
            }
        }
    }
    aug.into_iter().map(|r| r[n..].to_vec()).collect()
}

/// `(XᵀX + λI)⁻¹ XᵀE` with an explicit inverse.
pub fn ridge_by_inverse(x: &Rows, e: &Rows, lambda: f64) -> Rows {
    let mut g = gram(x);
    for (i, row) in g.iter_mut().enumerate() {
        row[i] += lambda;
    }
    matmul(&inverse(&g), &matmul(&transpose(x), e))
}

pub fn column_norms(x: &Rows) -> Vec<f64> {
    let n = x[0].len();
    (0..n)
        .map(|j| x.iter().map(|r| r[j] * r[j]).sum::<f64>().sqrt())
        .collect()
}

/// Two-pass Pearson correlation; `None` when either side has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        None
    } else {
        Some(cov / (va * vb).sqrt())
    }
}

/// Mean column-wise Pearson correlation, zero-variance columns counting 0.
pub fn mean_pearson(e: &Rows, e_hat: &Rows) -> f64 {
    let d = e[0].len();
    let mut total = 0.0;
    for j in 0..d {
        let a: Vec<f64> = e.iter().map(|r| r[j]).collect();
        let b: Vec<f64> = e_hat.iter().map(|r| r[j]).collect();
        total += pearson(&a, &b).unwrap_or(0.0);
    }
    total / d as f64
}

/// Indices of the `keep` largest values, ties to the lower index, ascending.
pub fn top_k_by_sort(scores: &[f64], keep: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut kept = idx[..keep].to_vec();
    kept.sort_unstable();
    kept
}

pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}
