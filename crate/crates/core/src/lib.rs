//! Domain mixture weight optimization for heterogeneous imitation-learning
//! datasets.
//!
//! The pipeline normalizes and bins actions per domain, trains a reference
//! behavior-cloning policy on the size-proportional mixture, then runs a
//! group-robust min-max over the excess loss against that reference. The
//! averaged domain weights can re-weight or subset the data for downstream
//! policy training.

pub mod dataset;
pub mod dro;
pub mod error;
mod fsutil;
pub mod pipeline;
pub mod policy;
pub mod preprocess;
pub mod reference;
pub mod report;
pub mod subset;

pub use error::{Error, Result};
