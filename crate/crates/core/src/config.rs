//! Pruning configuration: JSON file and/or CLI flags, flags winning.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{OlicaError, Result};
pub use crate::mha::VoMode;

/// Which activations feed the next block while pruning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Propagation {
    /// Outputs of the already pruned and calibrated block.
    #[default]
    Pruned,
    /// Outputs of the original block.
    Unpruned,
}

impl Propagation {
    pub fn as_str(self) -> &'static str {
        match self {
            Propagation::Pruned => "pruned",
            Propagation::Unpruned => "unpruned",
        }
    }
}

impl std::str::FromStr for Propagation {
    type Err = OlicaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pruned" => Ok(Propagation::Pruned),
            "unpruned" => Ok(Propagation::Unpruned),
            other => Err(OlicaError::arg(format!(
                "unknown propagation `{other}` (expected pruned or unpruned)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneConfig {
    pub sparsity: f64,
    pub lambda0: f64,
    pub rank_ratio: f64,
    /// Number of FFN layers that get an adapter; `None` picks
    /// `min(6, n_blocks / 2)`.
    pub calib_layers: Option<usize>,
    pub mode: VoMode,
    pub propagate: Propagation,
    pub seed: u64,
    /// Calibration text; the bundled training corpus when absent.
    pub calib: Option<PathBuf>,
    pub n_samples: usize,
    pub seq_len: usize,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig {
            sparsity: 0.0,
            lambda0: 0.5,
            rank_ratio: 0.03,
            calib_layers: None,
            mode: VoMode::FastOnd,
            propagate: Propagation::Pruned,
            seed: 0,
            calib: None,
            n_samples: 256,
            seq_len: 128,
        }
    }
}

impl PruneConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| OlicaError::arg(format!("invalid prune config: {e}")))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| OlicaError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn calib_layers_for(&self, n_blocks: usize) -> usize {
        self.calib_layers.unwrap_or_else(|| (n_blocks / 2).min(6))
    }

    pub fn validate(&self, n_blocks: usize) -> Result<()> {
        if !(0.0..1.0).contains(&self.sparsity) {
            return Err(OlicaError::arg(format!("sparsity {} outside [0, 1)", self.sparsity)));
        }
        if !(self.rank_ratio > 0.0 && self.rank_ratio <= 1.0) {
            return Err(OlicaError::arg(format!("rank_ratio {} outside (0, 1]", self.rank_ratio)));
        }
        if !(self.lambda0.is_finite() && self.lambda0 >= 0.0) {
            return Err(OlicaError::arg(format!("lambda0 {} must be finite and nonnegative", self.lambda0)));
        }
        let k = self.calib_layers_for(n_blocks);
        if k > n_blocks {
            return Err(OlicaError::arg(format!("calib_layers {k} exceeds the {n_blocks} blocks")));
        }
        if self.n_samples == 0 || self.seq_len == 0 {
            return Err(OlicaError::arg("n_samples and seq_len must be >= 1"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = PruneConfig::default();
        assert_eq!((c.lambda0, c.rank_ratio, c.n_samples, c.seq_len), (0.5, 0.03, 256, 128));
        assert_eq!(c.calib_layers_for(4), 2);
        assert_eq!(c.calib_layers_for(32), 6);
        assert!(c.validate(4).is_ok());
    }

    #[test]
    fn partial_json_fills_defaults() {
        let c = PruneConfig::from_json(r#"{"sparsity": 0.2, "mode": "wanda_only", "propagate": "unpruned"}"#).unwrap();
        assert_eq!(c.sparsity, 0.2);
        assert_eq!(c.mode, VoMode::WandaOnly);
        assert_eq!(c.propagate, Propagation::Unpruned);
        assert_eq!(c.lambda0, 0.5);
        assert!(PruneConfig::from_json(r#"{"sparsity": 0.2, "typo": 1}"#).is_err());
    }

    #[test]
    fn invalid_values() {
        let bad = [
            PruneConfig { sparsity: 1.0, ..Default::default() },
            PruneConfig { rank_ratio: 0.0, ..Default::default() },
            PruneConfig { calib_layers: Some(5), ..Default::default() },
            PruneConfig { n_samples: 0, ..Default::default() },
            PruneConfig { lambda0: f64::NAN, ..Default::default() },
        ];
        for c in bad {
            assert!(c.validate(4).is_err(), "{c:?}");
        }
    }
}
