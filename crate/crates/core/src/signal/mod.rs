//! Preprocessing (band filtering, per-lead z-score) and the stochastic
//! augmentation family that produces contrastive views.

mod augment;
pub mod filter;
mod preprocess;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

pub use augment::{augment_view, augment_view_traced, circular_shift, sample_view_pair, AugmentConfig, AugmentTrace};
pub use filter::FilterDesign;
pub use preprocess::{bandpass, preprocess, zscore_lead, PreprocessConfig};

use crate::{Error, Result};

/// Lead-major multi-lead waveform in `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Signal {
    leads: usize,
    len: usize,
    data: Vec<f64>,
}

impl Signal {
    pub fn new(leads: usize, len: usize, data: Vec<f64>) -> Result<Self> {
        if leads == 0 || len == 0 || data.len() != leads * len {
            return Err(Error::shape(
                "signal",
                format!("{leads} leads x {len} samples needs {} values, got {}", leads * len, data.len()),
            ));
        }
        Ok(Self { leads, len, data })
    }

    pub fn zeros(leads: usize, len: usize) -> Self {
        Self { leads, len, data: vec![0.0; leads * len] }
    }

    pub fn from_f32(leads: usize, len: usize, data: &[f32]) -> Result<Self> {
        Self::new(leads, len, data.iter().map(|&v| v as f64).collect())
    }

    pub fn leads(&self) -> usize {
        self.leads
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn lead(&self, i: usize) -> &[f64] {
        &self.data[i * self.len..(i + 1) * self.len]
    }

    pub fn lead_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.len..(i + 1) * self.len]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32).collect()
    }

    /// First non-finite sample as `(lead, index)`.
    pub fn first_non_finite(&self) -> Option<(usize, usize)> {
        self.data.iter().position(|v| !v.is_finite()).map(|i| (i / self.len, i % self.len))
    }
}
