//! Relation-aware image captioning over detected regions: pairwise spatial
//! geometry and its mixture-model discretization, a semantic relation
//! classifier, object/image/hierarchical graphs, an edge-gated GCN encoder
//! and a Transformer caption decoder, all on a small reverse-mode tensor
//! engine.

pub mod bleu;
pub mod config;
pub mod corpus;
pub mod decoder;
pub mod error;
pub mod gcn;
pub mod geometry;
pub mod gmm;
pub mod graph;
pub mod model;
pub mod optim;
pub mod relation;
pub mod search;
pub mod synthetic;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
