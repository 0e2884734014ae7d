//! Ensembles of deep-metric-learning losses trained over precomputed feature
//! vectors, with zero-shot (disjoint-class) retrieval evaluation.
//!
//! The crate is organized bottom-up:
//!
//! * [`numcore`]: dense matrices, parameters, Adam, cosine annealing and a
//!   central-difference gradient checker.
//! * [`featstore`]: feature files, synthetic datasets, disjoint-class splits
//!   and class-balanced batch sampling.
//! * [`heads`]: linear embedding heads.
//! * [`losses`]: triplet hinge, binomial deviance, Proxy-NCA and
//!   label-smoothed classification, each with exact gradients.
//! * [`ensemble`]: loss normalization, learnable weights, the diversity
//!   term, the combined objective and the training loop.
//! * [`compressor`]: distillation of a multi-head ensemble into one
//!   embedding through a normalized distance loss.
//! * [`evalkit`]: Recall@k, k-means NMI and kNN accuracy.
//! * [`runner`]: run configuration, orchestration, checkpoints and reports.

pub mod compressor;
pub mod ensemble;
pub mod error;
pub mod evalkit;
pub mod featstore;
pub mod heads;
pub mod losses;
pub mod numcore;
pub mod runner;

pub use error::{Error, Result};
pub use numcore::{Matrix, Param};
