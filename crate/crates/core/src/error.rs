use std::path::PathBuf;

use thiserror::Error;

use crate::model::LaplaceState;

pub type Result<T> = std::result::Result<T, VcmmError>;

#[derive(Debug, Error)]
pub enum VcmmError {
    /// Malformed input: wrong shapes, out-of-range values, non-finite numbers.
    #[error("invalid input: {0}")]
    Domain(String),

    /// Formulation 1 divides by the variance components.
    #[error("variance component {block} is zero; formulation 1 requires strictly positive variance components")]
    SingularParameter { block: usize },

    #[error("fixed-effect design is rank deficient (rank {rank} of {cols} columns)")]
    RankDeficient { rank: usize, cols: usize },

    #[error("random-effect block {block} has zero trace term (all-zero design block)")]
    DegenerateBlock { block: usize },

    /// The inner mode search hit its iteration cap. The best iterate is kept
    /// so callers can decide whether to continue with it.
    #[error("inner mode search did not converge after {iters} iterations (gradient max-norm {grad_norm:.3e})")]
    InnerNotConverged {
        iters: usize,
        grad_norm: f64,
        state: Box<LaplaceState>,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("unsupported dimension: {0}")]
    UnsupportedDimension(String),

    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl VcmmError {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        VcmmError::Domain(msg.into())
    }

    pub(crate) fn numerical(msg: impl Into<String>) -> Self {
        VcmmError::Numerical(msg.into())
    }
}
