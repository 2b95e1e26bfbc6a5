//! Seeded SGD experiments for measuring how much the training randomness
//! already hides a single changed example.

// `!(x > 0.0)` style guards reject NaN on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod cli;
pub mod data;
pub mod error;
pub mod harness;
pub mod model;
pub mod privacy;
pub mod rng;
pub mod stats;
pub mod theory;
pub mod train;

pub use error::{Error, Result};
