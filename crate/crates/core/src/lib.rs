//! Exact-likelihood autoregressive normalizing flows on compressed token
//! representations.
//!
//! The pipeline has two trained stages. A [`src::SrcModel`] compresses
//! normalized `N×n` token fields to `N×d`; a [`flow::FlowModel`] is then fit
//! by maximum likelihood on the re-normalized compact fields. Sampling runs
//! the flow in reverse and decodes back through the compressor.

pub mod autodiff;
pub mod data_io;
pub mod error;
pub mod flow;
pub mod nn;
pub mod real;
pub mod rng;
pub mod src;
pub mod tokenfield;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
pub use flow::{FlowConfig, FlowModel, GuidanceSpec, Label};
pub use real::Real;
pub use src::{SrcConfig, SrcModel};
pub use tokenfield::{ChannelStats, NoiseSpec, SpectrumReport, TokenField};
