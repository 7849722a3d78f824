//! Minimal dense-tensor substrate with reverse-mode automatic differentiation.
//!
//! Forward passes record onto a [`Graph`]; [`Graph::backward`] sweeps the
//! record in reverse. Parameters live in a [`ParamStore`] outside any graph,
//! so a frozen model can be shared read-only while each thread builds its
//! own graph.

pub mod archive;
pub mod attention;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod nn;
pub mod ops;
pub mod param;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use archive::Archive;
pub use attention::MultiHeadAttention;
pub use error::{Result, TensorError};
pub use graph::{Gradients, Graph, Var};
pub use kernels::pool::PoolKind;
pub use nn::ForwardCtx;
pub use ops::concat;
pub use param::{ParamId, ParamStore, Parameter};
pub use scalar::{DType, Float};
pub use tensor::Tensor;
