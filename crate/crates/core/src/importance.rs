//! Activation-weighted magnitude importance and top-k neuron selection.

use crate::error::{OlicaError, Result};
use crate::tensor::{column_norms, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NeuronKind {
    FfnNeuron,
    MhaEigenNeuron,
}

/// Per-neuron grouped importance; all scores are nonnegative.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceVector {
    pub scores: Vec<f64>,
    pub kind: NeuronKind,
}

impl ImportanceVector {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Elementwise score `‖x⁽ⁱ⁾‖₂ · |w_ij|` for `x` (n×d) and `w` (d×m).
pub fn wanda_scores(x: &Matrix, w: &Matrix) -> Result<Matrix> {
    if x.cols() != w.rows() {
        return Err(OlicaError::arg(format!(
            "activations have {} features but weights have {} rows",
            x.cols(),
            w.rows()
        )));
    }
    Ok(wanda_from_norms(&column_norms(x), w))
}

/// Same as [`wanda_scores`] with the activation column norms precomputed.
pub fn wanda_from_norms(norms: &[f64], w: &Matrix) -> Matrix {
    assert_eq!(norms.len(), w.rows());
    w.map(f64::abs).scale_rows(norms)
}

/// Sums each score matrix over its rows and adds the results column-wise.
///
/// Every matrix sharing the pruned index contributes one term: up and down
/// projections (plus the gate for gated FFNs), or the decomposed value and
/// output factors for an attention head.
pub fn neuron_scores(terms: &[&Matrix], kind: NeuronKind) -> Result<ImportanceVector> {
    let Some(first) = terms.first() else {
        return Err(OlicaError::arg("no score matrices given"));
    };
    let m = first.cols();
    if let Some(bad) = terms.iter().find(|t| t.cols() != m) {
        return Err(OlicaError::arg(format!(
            "score matrices disagree on neuron count: {} vs {m}",
            bad.cols()
        )));
    }
    let mut scores = vec![0.0; m];
    for t in terms {
        for i in 0..t.rows() {
            for (s, v) in scores.iter_mut().zip(t.row(i)) {
                *s += v;
            }
        }
    }
    Ok(ImportanceVector { scores, kind })
}

/// Indices of the `keep` highest scores, ties broken toward the lower index,
/// returned in ascending order.
pub fn select_kept(scores: &[f64], keep: usize) -> Result<Vec<usize>> {
    if keep == 0 || keep > scores.len() {
        return Err(OlicaError::arg(format!(
            "cannot keep {keep} of {} entries",
            scores.len()
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(keep);
    order.sort_unstable();
    Ok(order)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn wanda_single_entry() {
        let x = Matrix::from_rows(&[[3.0], [4.0]]);
        let w = Matrix::from_rows(&[[2.0]]);
        assert_eq!(wanda_scores(&x, &w).unwrap()[(0, 0)], 10.0);
    }

    #[test]
    fn wanda_zero_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = random(&mut rng, 4, 3);
        let s = wanda_scores(&x, &Matrix::zeros(3, 2)).unwrap();
        assert!(s.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wanda_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&mut rng, 4, 3);
        let w = random(&mut rng, 3, 2);
        let s = wanda_scores(&x, &w).unwrap();
        for i in 0..3 {
            let mut norm = 0.0;
            for r in 0..4 {
                norm += x[(r, i)] * x[(r, i)];
            }
            for j in 0..2 {
                assert!((s[(i, j)] - norm.sqrt() * w[(i, j)].abs()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn wanda_shape_mismatch() {
        assert!(wanda_scores(&Matrix::zeros(2, 3), &Matrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn neuron_scores_examples() {
        let z = Matrix::zeros(2, 3);
        let v = neuron_scores(&[&z, &z], NeuronKind::FfnNeuron).unwrap();
        assert_eq!(v.scores, vec![0.0; 3]);

        let ones = Matrix::from_fn(2, 2, |_, _| 1.0);
        let v = neuron_scores(&[&ones, &ones], NeuronKind::FfnNeuron).unwrap();
        assert_eq!(v.scores, vec![4.0, 4.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let up = random(&mut rng, 5, 4).map(f64::abs);
        let down = random(&mut rng, 5, 4).map(f64::abs);
        let v = neuron_scores(&[&up, &down], NeuronKind::FfnNeuron).unwrap();
        for j in 0..4 {
            let mut acc = 0.0;
            for i in 0..5 {
                acc += up[(i, j)] + down[(i, j)];
            }
            assert!((v.scores[j] - acc).abs() < 1e-12);
        }
        assert!(neuron_scores(&[&up, &Matrix::zeros(5, 3)], NeuronKind::FfnNeuron).is_err());
    }

    #[test]
    fn select_kept_examples() {
        assert_eq!(select_kept(&[1.0, 5.0, 3.0], 2).unwrap(), vec![1, 2]);
        assert_eq!(select_kept(&[2.0; 4], 2).unwrap(), vec![0, 1]);
        assert!(select_kept(&[1.0], 0).is_err());
        assert!(select_kept(&[1.0], 2).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let scores: Vec<f64> = (0..64).map(|_| rng.gen_range(0.0..1.0)).collect();
        assert_eq!(select_kept(&scores, 16).unwrap(), oracle::top_k_by_sort(&scores, 16));
    }

    proptest! {
        #[test]
        fn prop_selection_scale_invariant(seed in 0u64..500, c in 0.01f64..100.0, keep in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(&mut rng, 8, 5);
            let up = random(&mut rng, 5, 6);
            let down = random(&mut rng, 5, 6);
            let score = |x: &Matrix| {
                let a = wanda_scores(x, &up).unwrap();
                let b = wanda_scores(x, &down).unwrap();
                neuron_scores(&[&a, &b], NeuronKind::FfnNeuron).unwrap()
            };
            let base = score(&x);
            let scaled = score(&x.scale(c));
            for (a, b) in base.scores.iter().zip(&scaled.scores) {
                prop_assert!((a * c - b).abs() <= 1e-9 * b.abs().max(1.0));
            }
            prop_assert_eq!(select_kept(&base.scores, keep).unwrap(), select_kept(&scaled.scores, keep).unwrap());
        }

        #[test]
        fn prop_monotone_in_weight_magnitude(seed in 0u64..500, bump in 0.0f64..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(&mut rng, 6, 4);
            let up = random(&mut rng, 4, 3);
            let down = random(&mut rng, 4, 3);
            let (i, j) = (rng.gen_range(0..4), rng.gen_range(0..3));
            let mut bigger = up.clone();
            bigger[(i, j)] = bigger[(i, j)].signum() * (bigger[(i, j)].abs() + bump);
            let s = |u: &Matrix| {
                let a = wanda_scores(&x, u).unwrap();
                let b = wanda_scores(&x, &down).unwrap();
                neuron_scores(&[&a, &b], NeuronKind::FfnNeuron).unwrap().scores[j]
            };
            prop_assert!(s(&bigger) >= s(&up));
        }

        #[test]
        fn prop_keep_all_is_identity(n in 1usize..40, seed in 0u64..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            prop_assert_eq!(select_kept(&scores, n).unwrap(), (0..n).collect::<Vec<_>>());
        }
    }
}
