//! Adaptive knowledge-graph-guided crawling of retrieval-augmented generation
//! services, with a simulated victim, evaluation metrics and baselines.

pub mod config;
pub mod corpusgen;
pub mod crawl;
pub mod embed;
pub mod error;
pub mod extract;
pub mod kg;
pub mod metrics;
pub mod qgen;
pub mod sched;
pub mod theory;
pub mod victim;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
