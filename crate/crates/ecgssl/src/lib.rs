//! File formats, experiment configuration and the command-line front end
//! for [`ecgssl_core`].
//!
//! A corpus on disk is a `manifest.jsonl` (one JSON object per record)
//! next to a `blobs/` directory of raw 12 x 5000 f32 little-endian signals.

pub mod checkpoint;
pub mod cli;
pub mod config;
mod error;
pub mod manifest;
pub mod metrics;
pub mod plot;

pub use ecgssl_core as core;
pub use error::{Error, Result};
