//! Gradient compression for data-parallel SGD: random-k, top-k, DGC and QSGD
//! compressors with error feedback, a bit-exact communication cost model, and a
//! deterministic single-process simulator of synchronous parameter-server
//! training with an experiment harness around it.

// `!(x > 0.0)` deliberately rejects NaN alongside non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod compressors;
pub mod costmodel;
pub mod error;
pub mod harness;
pub mod models;
pub mod numerics;
pub mod simulator;

pub use error::{Error, Result};
