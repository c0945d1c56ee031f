use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = OlicaError> = std::result::Result<T, E>;

/// Failures while reading or validating a checkpoint container.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not an olica checkpoint (format tag {found:?})")]
    BadFormat { found: String },
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("malformed header: {0}")]
    Header(String),
    #[error("tensor `{tensor}` extends past the end of the payload")]
    Truncated { tensor: String },
    #[error("tensor `{tensor}` has shape {found:?}, expected {expected}")]
    Shape {
        tensor: String,
        found: Vec<usize>,
        expected: String,
    },
    #[error("tensor `{tensor}` contains non-finite values")]
    NonFinite { tensor: String },
    #[error("missing tensor `{0}`")]
    Missing(String),
}

#[derive(Debug, Error)]
pub enum OlicaError {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("SVD did not converge on a {rows}x{cols} matrix")]
    Decomposition { rows: usize, cols: usize },

    #[error("normal equations are singular at lambda = {lambda}; use lambda > 0")]
    Singular { lambda: f64 },

    #[error(
        "infeasible budget: sparsity {requested} cannot be reached, maximum achievable is {max_achievable:.4}"
    )]
    Budget { requested: f64, max_achievable: f64 },

    #[error("block {layer}{}: {source}", head.map(|h| format!(", head {h}")).unwrap_or_default())]
    InLayer {
        layer: usize,
        head: Option<usize>,
        #[source]
        source: Box<OlicaError>,
    },

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl OlicaError {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        OlicaError::Argument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        OlicaError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_layer(self, layer: usize, head: Option<usize>) -> Self {
        OlicaError::InLayer {
            layer,
            head,
            source: Box::new(self),
        }
    }

    /// Process exit code used by the command-line tool.
    ///
    /// 2 for configuration or budget problems, 3 for numerical failures,
    /// 4 for I/O and checkpoint corruption.
    pub fn exit_code(&self) -> u8 {
        match self {
            OlicaError::Argument(_) | OlicaError::Budget { .. } => 2,
            OlicaError::Decomposition { .. } | OlicaError::Singular { .. } => 3,
            OlicaError::Checkpoint(_) | OlicaError::Io { .. } => 4,
            OlicaError::InLayer { source, .. } => source.exit_code(),
        }
    }
}
