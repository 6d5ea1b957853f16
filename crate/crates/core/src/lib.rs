//! Siamese autoencoder pipeline for behavioural case linkage.
//!
//! The crate is organised along the stages of the pipeline:
//!
//! - [`dataset`]: case records, CSV I/O, duplicate-entry merging, pairwise
//!   geographic-temporal features.
//! - [`synthgen`]: synthetic sparse binary case tables with series structure.
//! - [`mapping`]: many-to-one feature consolidation with OR aggregation.
//! - [`network`]: the shared-weight autoencoder, its forward pass and exact
//!   backward pass.
//! - [`training`]: losses, Adam, cosine annealing, series-aware folds, pair
//!   sampling and the per-fold training loop.
//! - [`evaluation`]: similarity scoring, Top-K ranking, ROC-AUC, TP at a fixed
//!   FP rate, AUPRC, the logistic-regression baseline and cross-validation.
//! - [`config`]: flat `key = value` run configuration files and config hashes.

pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod mapping;
pub mod network;
pub mod synthgen;
pub mod training;

pub use error::{Error, Result};
