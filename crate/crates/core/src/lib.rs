//! Forget-free continual learning over a shared pool of 32-bit weight slots.
//!
//! Each task gets its own sparse sub-network, chosen by a lottery-ticket
//! population search ([`pruning`]), then compressed with a per-layer k-means
//! codebook at the smallest bit-width that keeps accuracy within tolerance
//! ([`quant`]). The resulting codes are written as task-exclusive bit
//! components into the slots of a [`mask::WeightSlotStore`]; committed
//! components are never modified again, so earlier tasks cannot be forgotten.
//!
//! The [`runner`] module drives the whole per-task loop, with
//! [`checkpoint`], [`config`] and [`report`] handling persistence.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod mask;
pub mod metrics;
pub mod nn;
pub mod pruning;
pub mod quant;
pub mod report;
pub mod runner;
pub mod scenario;
pub mod seed;

pub use error::{Error, Result};
pub use mask::{TaskId, TaskMask, WeightSlotStore};
pub use nn::{DenseWeights, ModelSpec, TrainConfig};
