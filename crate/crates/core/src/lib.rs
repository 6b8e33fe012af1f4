//! Part-based recurrent multi-view aggregation for 3D shape retrieval.
//!
//! The crate is self-contained: a small reverse-mode autodiff engine
//! ([`graph`]), peephole LSTMs ([`recurrent`]), a shared-weight view encoder
//! ([`encoder`]), regional attention ([`rau`]), the two-level aggregator and
//! its ablations ([`aggregator`]), a procedural multi-view dataset
//! ([`dataset`]), two-stage training and retrieval evaluation ([`train`],
//! [`retrieval`], [`metrics`]) and the binary checkpoint format
//! ([`checkpoint`]).

pub mod aggregator;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod rau;
pub mod recurrent;
pub mod retrieval;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;
