//! Class-incremental learning on a frozen feature extractor.
//!
//! Each task trains a bottleneck adapter (merged with its frozen predecessors after
//! every step), class prototypes are extracted under every retained adapter, and at
//! test time the adapter of the query's task is retrieved by iterated self-consistent
//! prediction and ensembled with the first task's adapter.
//!
//! Modules, bottom up:
//! - [`numerics`]: matrices, seeded RNG, Cholesky and Gaussian sampling, cosine similarity
//! - [`backbone`]: frozen model, adapters, task heads, forward and backward passes
//! - [`adapters`]: adapter initialization, merging, frozen registry
//! - [`training`]: momentum SGD per task, prototypes, Gaussian statistics, head alignment
//! - [`inference`]: cosine classifier, task-id lookup, self-refined retrieval, ensemble
//! - [`stream`]: class splits and datasets
//! - [`harness`]: experiments, ablations, metrics and reports

pub mod adapters;
pub mod backbone;
pub mod checkpoint;
pub mod error;
pub mod harness;
pub mod inference;
pub mod numerics;
pub mod stream;
pub mod training;

pub use error::{MosError, Result};
