use thiserror::Error;

/// Errors surfaced by graph construction, backward passes, and checkpoint I/O.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch, left is {lhs_rows}x{lhs_cols}, right is {rhs_rows}x{rhs_cols}")]
    ShapeMismatch {
        op: &'static str,
        lhs_rows: usize,
        lhs_cols: usize,
        rhs_rows: usize,
        rhs_cols: usize,
    },

    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },

    #[error("backward requires a scalar loss, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },

    #[error("backward was already run on this graph; build a fresh graph per pass")]
    BackwardAlreadyRun,

    #[error("node {0} does not exist in this graph")]
    UnknownNode(usize),

    #[error("parameter {0} does not exist in this set")]
    UnknownParam(usize),

    #[error("graph contains a non-smooth operation ({0}); finite-difference checking is not meaningful")]
    NotCheckable(&'static str),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
