//! Cross-modal consistency filtering over a heterogeneous Image / Caption / QA
//! graph.
//!
//! The pipeline is: load a corpus of precomputed embeddings and entailment
//! scores ([`corpus`]), build the typed graph with consistency tokens and weak
//! keep labels ([`graph`]), train the edge-aware hetero-GNN on those weak
//! labels ([`model`], [`train`]), then score, filter and evaluate QA items
//! ([`filter`]). Model code is generic over the scalar type; the aliases
//! below fix it to `f32` or `f64`.

pub mod autodiff;
pub mod checkpoint;
pub mod corpus;
pub mod filter;
pub mod graph;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod train;

pub use scalar::{Precision, Scalar};

pub type Matrix32 = autodiff::Matrix<f32>;
pub type Matrix64 = autodiff::Matrix<f64>;
pub type Tape32 = autodiff::Tape<f32>;
pub type Tape64 = autodiff::Tape<f64>;
pub type Model32 = model::Model<f32>;
pub type Model64 = model::Model<f64>;
pub type GraphTensors32 = model::GraphTensors<f32>;
pub type GraphTensors64 = model::GraphTensors<f64>;
