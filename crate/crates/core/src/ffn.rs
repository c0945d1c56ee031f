//! Structured removal of FFN intermediate neurons.

use crate::error::{OlicaError, Result};
use crate::importance::{neuron_scores, select_kept, wanda_from_norms, ImportanceVector, NeuronKind};
use crate::tensor::{column_norms, Matrix};

/// Feed-forward weights, all stored d×m: `σ(X·wu)·wdᵀ`, or
/// `(X·wu ⊙ σ(X·wg))·wdᵀ` when the gate is present.
#[derive(Debug, Clone, PartialEq)]
pub struct FfnWeights {
    pub wu: Matrix,
    pub wd: Matrix,
    pub wg: Option<Matrix>,
}

impl FfnWeights {
    pub fn new(wu: Matrix, wd: Matrix, wg: Option<Matrix>) -> Result<Self> {
        let shape = wu.shape();
        if wd.shape() != shape || wg.as_ref().is_some_and(|g| g.shape() != shape) {
            return Err(OlicaError::arg(format!(
                "FFN matrices disagree in shape: up {:?}, down {:?}, gate {:?}",
                shape,
                wd.shape(),
                wg.as_ref().map(Matrix::shape)
            )));
        }
        Ok(FfnWeights { wu, wd, wg })
    }

    pub fn d(&self) -> usize {
        self.wu.rows()
    }

    /// Intermediate width m.
    pub fn width(&self) -> usize {
        self.wu.cols()
    }

    pub fn is_gated(&self) -> bool {
        self.wg.is_some()
    }

    pub fn param_count(&self) -> usize {
        let per = self.wu.rows() * self.wu.cols();
        per * if self.is_gated() { 3 } else { 2 }
    }

    /// Keeps the listed intermediate neurons in every matrix.
    pub fn select(&self, kept: &[usize]) -> FfnWeights {
        FfnWeights {
            wu: self.wu.select_columns(kept),
            wd: self.wd.select_columns(kept),
            wg: self.wg.as_ref().map(|g| g.select_columns(kept)),
        }
    }

    /// Grouped importance of each intermediate neuron given the activation
    /// column norms of the layer input.
    pub fn neuron_importance(&self, norms: &[f64]) -> ImportanceVector {
        let up = wanda_from_norms(norms, &self.wu);
        let down = wanda_from_norms(norms, &self.wd);
        let gate = self.wg.as_ref().map(|g| wanda_from_norms(norms, g));
        let mut terms = vec![&up, &down];
        if let Some(g) = &gate {
            terms.push(g);
        }
        neuron_scores(&terms, NeuronKind::FfnNeuron).expect("FFN matrices share a width")
    }
}

/// Drops all but the `keep` most important intermediate neurons, scored on
/// the layer inputs `x` (n×d). Returns the slimmer weights and the kept
/// indices (ascending).
pub fn prune_ffn(ffn: &FfnWeights, x: &Matrix, keep: usize) -> Result<(FfnWeights, Vec<usize>)> {
    if x.cols() != ffn.d() {
        return Err(OlicaError::arg(format!(
            "activations have {} features, FFN expects {}",
            x.cols(),
            ffn.d()
        )));
    }
    prune_ffn_with_norms(ffn, &column_norms(x), keep)
}

pub fn prune_ffn_with_norms(ffn: &FfnWeights, norms: &[f64], keep: usize) -> Result<(FfnWeights, Vec<usize>)> {
    if keep == 0 || keep > ffn.width() {
        return Err(OlicaError::arg(format!(
            "FFN keep width {keep} out of range 1..={}",
            ffn.width()
        )));
    }
    let scores = ffn.neuron_importance(norms);
    let kept = select_kept(&scores.scores, keep)?;
    Ok((ffn.select(&kept), kept))
}
