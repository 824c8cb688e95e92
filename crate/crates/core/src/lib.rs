//! End-to-end toolkit for modelling administrative career histories as token
//! sequences: a synthetic population generator with planted causal effects, a
//! calendar-grammar encoder, a decoder-only sequence model with local and
//! linear-attention heads trained from scratch, conditional generation, and an
//! estimator suite (difference in means, local discontinuity contrasts, event
//! studies, propensity matching) that compares model-simulated futures against
//! the ground truth the model never saw.

pub mod causal;
pub mod encode;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod generate;
pub mod model;
pub mod rng;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
