use alloc::format;
use alloc::vec::Vec;

use super::filter::{bilinear_bandpass_sos, sos_filter, FilterDesign, SpectralPlan};
use super::Signal;
use crate::{math, Error, Result, SAMPLE_RATE_HZ};

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(default, deny_unknown_fields))]
pub struct PreprocessConfig {
    pub lowpass_hz: f64,
    pub highpass_hz: f64,
    pub filter_order: usize,
    pub zero_phase: bool,
    pub zscore_eps: f64,
    pub design: FilterDesign,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            lowpass_hz: 150.0,
            highpass_hz: 0.5,
            filter_order: 4,
            zero_phase: true,
            zscore_eps: 1e-8,
            design: FilterDesign::AnalogMagnitude,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        let nyquist = SAMPLE_RATE_HZ / 2.0;
        if !(0.0 < self.highpass_hz && self.highpass_hz < self.lowpass_hz && self.lowpass_hz < nyquist) {
            return Err(Error::Config(format!(
                "need 0 < highpass_hz ({}) < lowpass_hz ({}) < {nyquist}",
                self.highpass_hz, self.lowpass_hz
            )));
        }
        if self.filter_order == 0 {
            return Err(Error::Config("filter_order must be >= 1".into()));
        }
        if !(self.zscore_eps > 0.0) {
            return Err(Error::Config(format!("zscore_eps must be > 0, got {}", self.zscore_eps)));
        }
        Ok(())
    }
}

fn check_finite(signal: &Signal) -> Result<()> {
    if let Some((lead, idx)) = signal.first_non_finite() {
        return Err(Error::Validation(format!("non-finite sample at lead {lead}, index {idx}")));
    }
    Ok(())
}

/// Band-pass every lead (no normalization).
pub fn bandpass(signal: &Signal, cfg: &PreprocessConfig) -> Result<Signal> {
    cfg.validate()?;
    check_finite(signal)?;
    let mut data = Vec::with_capacity(signal.data().len());
    match cfg.design {
        FilterDesign::AnalogMagnitude => {
            let plan = SpectralPlan::new(
                signal.len(),
                SAMPLE_RATE_HZ,
                cfg.highpass_hz,
                cfg.lowpass_hz,
                cfg.filter_order,
                cfg.zero_phase,
            );
            let mut l = 0;
            while l < signal.leads() {
                let second = (l + 1 < signal.leads()).then(|| signal.lead(l + 1));
                let (a, b) = plan.apply_pair(signal.lead(l), second);
                data.extend(a);
                if let Some(b) = b {
                    data.extend(b);
                }
                l += 2;
            }
        }
        FilterDesign::Bilinear => {
            let sos = bilinear_bandpass_sos(SAMPLE_RATE_HZ, cfg.highpass_hz, cfg.lowpass_hz, cfg.filter_order);
            for l in 0..signal.leads() {
                data.extend(sos_filter(&sos, signal.lead(l), cfg.zero_phase));
            }
        }
    }
    Signal::new(signal.leads(), signal.len(), data)
}

/// Z-scores a lead in place with the population std. A lead whose std does
/// not exceed `eps` is flat and becomes all zeros.
pub fn zscore_lead(lead: &mut [f64], eps: f64) {
    let m = math::mean(lead);
    let sd = math::std_dev(lead);
    if sd <= eps {
        lead.fill(0.0);
        return;
    }
    for v in lead.iter_mut() {
        *v = (*v - m) / sd;
    }
}

/// Band-pass then per-lead z-score.
pub fn preprocess(signal: &Signal, cfg: &PreprocessConfig) -> Result<Signal> {
    let mut out = bandpass(signal, cfg)?;
    for l in 0..out.leads() {
        zscore_lead(out.lead_mut(l), cfg.zscore_eps);
    }
    Ok(out)
}
