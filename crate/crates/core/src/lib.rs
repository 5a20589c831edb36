//! Causal-NoPE transformer laboratory.
//!
//! A from-scratch f32 tensor/autodiff engine, a decoder-only transformer
//! without positional encodings (plus a non-causal control with learned
//! absolute positional embeddings), synthetic position-sensitive tasks,
//! training, and the analysis toolkit around the adjacency pattern of
//! self-cosine-similarity matrices: adjacency probability scores, variance
//! scoring, coefficient simulations, and MLP position probes.

pub mod analysis;
pub mod error;
pub mod graph;
pub mod model;
pub mod probing;
pub mod report;
pub mod simulation;
pub mod tasks;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use graph::{AttnMask, Graph, NodeId};
pub use tensor::Tensor;
