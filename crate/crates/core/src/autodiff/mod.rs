//! Minimal reverse-mode automatic differentiation for the transformer
//! blocks used by the compressor and the flow.

mod graph;
mod params;

pub use graph::{Graph, Var};
pub use params::{Grads, ParamId, ParamSet, Tensor};
