//! Dense f64 matrices with define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] records operations as they execute; [`Graph::backward`] replays the
//! tape once in reverse and accumulates gradients for every [`Parameter`] leaf into
//! a [`GradStore`]. Besides elementwise and matrix primitives, the graph carries
//! fused kernels for sequence models: windowed causal attention, causal linear
//! attention over positive random features (prefix-sum form), RMS normalization,
//! rotary position maps, periodic time feature maps, and masked cross-entropy.
//!
//! Everything is computed in f64. Shapes are strictly two-dimensional; vectors are
//! `1 x n` rows and scalars are `1 x 1`. Gradients accumulate additively when a
//! node is used more than once, and a second backward pass on the same graph is an
//! error rather than a silent recomputation.

mod backward;
mod check;
mod checkpoint;
mod error;
mod graph;
mod param;
mod tensor;

pub use check::{grad_check, GradCheckReport};
pub use checkpoint::{load_params, save_params, CheckpointExtra};
pub use error::TensorError;
pub use graph::{Graph, GraphDiagnostics, NodeId};
pub use param::{GradStore, ParamId, ParamSet, Parameter};
pub use tensor::Tensor;

/// Row-level kernels behind the graph operations. Incremental decoders reuse
/// these so a token-by-token pass reproduces the batched forward bit for bit:
/// equality of results is guaranteed by sharing the arithmetic, not by
/// tolerance.
pub mod kernels {
    pub use crate::graph::{gelu_scalar, rope_apply, softmax_into, RMSNORM_EPS};
    pub use crate::tensor::{axpy, dot};
}

/// Result alias for fallible tensor operations.
pub type Result<T> = std::result::Result<T, TensorError>;
