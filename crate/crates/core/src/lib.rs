//! Multimodal tissue classification from patch morphology features and
//! spatial gene expression.

pub mod analysis;
pub mod autodiff;
pub mod cli;
pub mod data;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod metrics;
pub mod pathway;
pub mod seed;
pub mod tme_graph;
pub mod training;

pub use error::{Error, Result};
