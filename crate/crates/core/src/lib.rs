//! Tree-based progressive regression for watch-time prediction.
//!
//! The watch-time range is discretized into a full binary tree of quantile
//! intervals; a shared-trunk network predicts conditional child
//! probabilities at every internal node, giving a distribution over leaf
//! intervals whose expectation is the prediction. On top of that base
//! model this crate implements:
//!
//! - per-sample tree structure learning: pruning heads sample subtree
//!   masks, scored by a self-critical reward and trained with REINFORCE;
//! - debiased conditional training: each path step's loss is reweighted by
//!   its inverse reach propensity, undoing the selection bias of training
//!   classifiers only on samples that reach them;
//! - baselines (ordinal regression over thresholds, direct squared-error
//!   regression), evaluation metrics, a synthetic benchmark generator, and
//!   checkpointing for the CLI.
//!
//! Training and evaluation run data-parallel when the `parallel` feature
//! (default) is enabled, with bit-identical results to the sequential
//! fallback.

pub mod baselines;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod nn;
pub mod par;
pub mod tpm;
pub mod train;
pub mod tree;
pub mod tsl;

pub use error::{Error, Result};
