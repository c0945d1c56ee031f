//! Retraining-free structured pruning of small decoder-only transformers.
//!
//! Attention heads are pruned in a decomposed basis (orthogonal neuron
//! decomposition of the value–output product, weighted low-rank query/key
//! factors), FFN neurons by activation-weighted magnitude, and the error of
//! the worst-hit FFN layers is partially undone by a ridge-fitted low-rank
//! linear adapter.

pub mod allocation;
pub mod calibration;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod ffn;
pub mod importance;
pub mod mha;
pub mod model;
pub mod pipeline;
pub mod tensor;

#[cfg(test)]
#[path = "../tests/common/oracle.rs"]
mod oracle;

pub use allocation::{allocate, Budget, LayerDims, ModelShape};
pub use calibration::LowRankAdapter;
pub use checkpoint::{load_checkpoint, save_checkpoint, Manifest, PruningMeta};
pub use config::{Propagation, PruneConfig, VoMode};
pub use error::{CheckpointError, OlicaError, Result};
pub use model::{Activation, Model, ModelConfig};
pub use pipeline::{eval_model, inspect, prune_model, sample_calibration, PruneReport};
pub use tensor::Matrix;
