//! Disentangled variational representations for cross-modality feature
//! matching, built on small hand-differentiated networks.

pub mod cli;
pub mod error;
pub mod evalkit;
pub mod mlp;
pub mod numerics;
pub mod persistence;
pub mod recognition;
pub mod synthdata;
pub mod trainer;
pub mod variational;

pub use error::{DvrError, Result};
