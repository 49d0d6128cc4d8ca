//! Context-aware click models and a revenue-aware reranker for search
//! result pages.

pub mod clicker;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gbdt;
pub mod metrics;
pub mod numcore;
pub mod permutation;
pub mod reranker;
pub mod saint;
pub mod seed;

pub use error::{Error, Result};
pub use permutation::Permutation;
