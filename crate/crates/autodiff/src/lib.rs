//! Minimal dense-tensor reverse-mode differentiation in f64.
//!
//! Enough machinery for small transformers and actor-critic networks:
//! a [`Graph`] records a forward computation over [`Tensor`]s, `backward`
//! returns exact gradients, and [`Adam`] applies them to a [`ParamStore`].

mod adam;
pub mod checkpoint;
mod error;
mod graph;
mod kernels;
mod params;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::Checkpoint;
pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
