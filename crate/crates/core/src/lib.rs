//! Hierarchical reasoning graph network for scoring interview transcripts.

mod error;

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoders;
pub mod experiment;
pub mod gat;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod text;
pub mod train;

pub use error::{Error, Result};
