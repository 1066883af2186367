//! Minimal reverse-mode automatic differentiation and the layers the
//! pipeline's three networks need: 1-D temporal convolution, multi-head
//! self-attention, linear layers, layer norm, smooth activations, MSE, and
//! a bias-corrected adaptive-moment optimizer.
//!
//! Everything is 64-bit. A [`Tape`] records one forward graph; calling
//! [`Tape::backward`] once populates gradients for all named parameters.
//! Values are `ndarray` arrays; the heavy ops are lowered onto GEMM.

mod gradcheck;
mod nn;
mod tape;

pub use gradcheck::{gradcheck, GradcheckConfig, GradcheckReport};
pub use nn::{adam_step, uniform_fan_in, AdamConfig, AdamState, ParamSet};
pub use tape::{Gradients, NodeId, Tape};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch in {op}: {details}")]
    ShapeMismatch { op: &'static str, details: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("state error: {0}")]
    State(&'static str),
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("unknown parameter {0}")]
    UnknownParam(String),
}
