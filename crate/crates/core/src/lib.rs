//! Patient-temporal contrastive pre-training for 12-lead ECGs.
//!
//! Everything in this crate is pure computation over in-memory data and
//! builds without `std`: the synthetic corpus generator, preprocessing and
//! augmentation, positive-pair construction, a reverse-mode autodiff engine,
//! the ResNet1D encoder with its heads, the loss functions, and the
//! pre-training / fine-tuning loops with their metrics. File formats, the
//! CLI and anything else touching the OS live in the `ecgssl` crate.

#![no_std]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod autodiff;
pub mod corpus;
mod error;
pub mod math;
pub mod model;
pub mod objectives;
pub mod pairing;
pub mod rng;
pub mod signal;
pub mod train;

pub use error::{Error, Result};

/// Number of leads in every record.
pub const LEADS: usize = 12;
/// Samples per lead (10 s at 500 Hz).
pub const SAMPLES: usize = 5000;
/// Fixed acquisition rate.
pub const SAMPLE_RATE_HZ: f64 = 500.0;
