//! Model drift estimation from batch-normalization statistics.
//!
//! A trained network's BN layers carry running estimates of the data it was
//! trained on. Comparing those estimates against the statistics of incoming
//! unlabeled batches gives a drift score that detects dataset shift and
//! ranks candidate models without labels.

pub mod bn;
pub mod drift;
pub mod error;
pub mod experiments;
pub mod mdet;
pub mod metrics;
pub mod net;
pub mod select;
pub mod shift;
pub mod svd;
pub mod tensor;

pub use error::{Error, Result};
