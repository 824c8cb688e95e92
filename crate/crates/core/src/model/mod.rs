//! Decoder-only sequence model over calendar-grammar tokens.
//!
//! The embedding block adds gated position and time streams to mean-centered
//! token embeddings; each decoder block normalizes, attends with a mix of
//! exact windowed-softmax heads and rotary linear-attention heads over
//! positive random features, and passes through a GELU feedforward, all with
//! pre-norm residuals. An untied linear head maps back to the vocabulary.
//! [`DecodeState`] evaluates the same network one token at a time and matches
//! the batched forward bit for bit.

mod config;
mod decode;
mod forward;
mod params;
mod projections;

pub use config::ModelConfig;
pub use decode::DecodeState;
pub use forward::{build_forward, build_loss_sum, sinusoidal_table, ForwardBuild, ForwardOpts, LossBuild};
pub use params::{ModelParams, ParameterCensus};
pub use projections::{orthogonal_features, Projections};
