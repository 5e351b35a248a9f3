//! Minimal deterministic numeric substrate: dense tensors, a recorded
//! computation graph with reverse-mode gradients, Adam, finite-difference
//! gradient checks and a binary checkpoint container.
//!
//! Training uses `f32`. Every graph and layer is generic over [`Real`] so the
//! same model code can be evaluated in `f64` when checking gradients.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;
pub mod real;
pub mod tensor;

pub use error::{NnError, Result};
pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Gradients, Graph, Group, NodeId};
pub use layers::{linear, FeedForward, LayerNorm, Linear, MultiHeadAttention};
pub use optim::{adam_step, AdamConfig, AdamState};
pub use params::{ParamGroup, ParamId, ParamStore};
pub use real::Real;
pub use tensor::Tensor;
