//! Balanced training and merging (BTM) for long-tailed classification.
//!
//! The crate is organised bottom-up:
//!
//! - [`metrics`]: per-class recall and generalized (power) means.
//! - [`dataman`]: synthetic source data, long-tailed down-sampling, balanced
//!   few-shot subsets, IDX ingestion and the `BTMDATA1` container.
//! - [`nncore`]: a small deterministic MLP with SGD, freeze masks, mixup and
//!   the `BTMCKPT1` checkpoint format.
//! - [`merge`]: weight interpolation, averaging, adaptive ratios, greedy soups.
//! - [`pipeline`]: the pre-train / FC / BTM / post-train stages, experiment
//!   records and ablation grids.

pub mod dataman;
pub mod error;
pub mod merge;
pub mod metrics;
pub mod nncore;
pub mod pipeline;

pub(crate) mod rng;

pub use error::{BtmError, Result};
