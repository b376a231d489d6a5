use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::Rng as _;

use super::Signal;
use crate::rng::{derive_seed, normal, rng_from};
use crate::{math, Error, Result, SAMPLE_RATE_HZ};

/// Magnitudes of the augmentation family. Every member can be switched off
/// (zero magnitude, unit scale range), which makes the whole family the
/// identity.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(default, deny_unknown_fields))]
pub struct AugmentConfig {
    /// Gaussian noise std as a fraction of each lead's std.
    pub noise_sigma: f64,
    /// Global amplitude factor drawn uniformly from `[lo, hi]`.
    pub scale_range: [f64; 2],
    /// Circular shift drawn uniformly from `[-max, max]` samples.
    pub max_shift_samples: usize,
    /// Length of each masked span as a fraction of the record.
    pub mask_fraction: f64,
    pub mask_spans: usize,
    pub lead_dropout_p: f64,
    /// Baseline wander amplitude (signal units).
    pub wander_amp: f64,
    pub wander_hz: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            noise_sigma: 0.05,
            scale_range: [0.8, 1.2],
            max_shift_samples: 250,
            mask_fraction: 0.1,
            mask_spans: 2,
            lead_dropout_p: 0.1,
            wander_amp: 0.05,
            wander_hz: 0.33,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        Self {
            noise_sigma: 0.0,
            scale_range: [1.0, 1.0],
            max_shift_samples: 0,
            mask_fraction: 0.0,
            mask_spans: 0,
            lead_dropout_p: 0.0,
            wander_amp: 0.0,
            wander_hz: 0.33,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.noise_sigma == 0.0
            && self.scale_range == [1.0, 1.0]
            && self.max_shift_samples == 0
            && (self.mask_spans == 0 || self.mask_fraction == 0.0)
            && self.lead_dropout_p == 0.0
            && self.wander_amp == 0.0
    }

    pub fn validate(&self, len: usize) -> Result<()> {
        let [lo, hi] = self.scale_range;
        if !(self.noise_sigma >= 0.0) || !(self.wander_amp >= 0.0) {
            return Err(Error::Config("noise_sigma and wander_amp must be >= 0".into()));
        }
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Config(format!("scale_range must satisfy 0 < lo <= hi, got [{lo}, {hi}]")));
        }
        if !(0.0..=1.0).contains(&self.mask_fraction) || !(0.0..=1.0).contains(&self.lead_dropout_p) {
            return Err(Error::Config("mask_fraction and lead_dropout_p must lie in [0, 1]".into()));
        }
        if !(self.wander_hz > 0.0 && self.wander_hz <= 0.5) {
            return Err(Error::Config(format!("wander_hz must lie in (0, 0.5], got {}", self.wander_hz)));
        }
        if self.mask_spans * self.span_len(len) > len {
            return Err(Error::Config(format!(
                "{} spans of {} samples do not fit in {len}",
                self.mask_spans,
                self.span_len(len)
            )));
        }
        Ok(())
    }

    pub fn span_len(&self, len: usize) -> usize {
        math::round(self.mask_fraction * len as f64) as usize
    }
}

/// What a single call to [`augment_view_traced`] drew.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentTrace {
    pub shift: i64,
    pub scale: f64,
    /// `(start, len)` of each zeroed time span, non-overlapping and sorted.
    pub masked: Vec<(usize, usize)>,
    pub dropped: Vec<bool>,
}

/// Rotates every lead right by `shift` samples (negative rotates left).
pub fn circular_shift(signal: &Signal, shift: i64) -> Signal {
    let n = signal.len() as i64;
    let s = shift.rem_euclid(n) as usize;
    let mut out = Signal::zeros(signal.leads(), signal.len());
    for l in 0..signal.leads() {
        let (src, dst) = (signal.lead(l), out.lead_mut(l));
        let k = signal.len() - s;
        dst[s..].copy_from_slice(&src[..k]);
        dst[..s].copy_from_slice(&src[k..]);
    }
    out
}

/// One stochastic view. Members apply in a fixed order: circular shift,
/// amplitude scaling, baseline wander, Gaussian noise, time masking, lead
/// dropout. All draws come from `seed`.
pub fn augment_view(signal: &Signal, cfg: &AugmentConfig, seed: u64) -> Result<Signal> {
    augment_view_traced(signal, cfg, seed).map(|(s, _)| s)
}

pub fn augment_view_traced(signal: &Signal, cfg: &AugmentConfig, seed: u64) -> Result<(Signal, AugmentTrace)> {
    let len = signal.len();
    cfg.validate(len)?;
    let mut rng = rng_from(&[seed, 0x6175_676d]);
    let mut trace = AugmentTrace { shift: 0, scale: 1.0, masked: Vec::new(), dropped: vec![false; signal.leads()] };

    let mut out = if cfg.max_shift_samples > 0 {
        let m = cfg.max_shift_samples as i64;
        trace.shift = rng.random_range(-m..=m);
        circular_shift(signal, trace.shift)
    } else {
        signal.clone()
    };

    let [lo, hi] = cfg.scale_range;
    if lo != 1.0 || hi != 1.0 {
        trace.scale = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        out.data.iter_mut().for_each(|v| *v *= trace.scale);
    }

    if cfg.wander_amp > 0.0 {
        let w = 2.0 * PI * cfg.wander_hz / SAMPLE_RATE_HZ;
        for l in 0..out.leads() {
            let phase = rng.random_range(0.0..2.0 * PI);
            for (i, v) in out.lead_mut(l).iter_mut().enumerate() {
                *v += cfg.wander_amp * math::sin(w * i as f64 + phase);
            }
        }
    }

    if cfg.noise_sigma > 0.0 {
        for l in 0..out.leads() {
            let sd = cfg.noise_sigma * math::std_dev(out.lead(l));
            for v in out.lead_mut(l).iter_mut() {
                *v += sd * normal(&mut rng);
            }
        }
    }

    let span = cfg.span_len(len);
    if cfg.mask_spans > 0 && span > 0 {
        let free = len - cfg.mask_spans * span;
        let mut gaps: Vec<usize> = (0..cfg.mask_spans).map(|_| rng.random_range(0..=free)).collect();
        gaps.sort_unstable();
        for (i, g) in gaps.into_iter().enumerate() {
            let start = g + i * span;
            for l in 0..out.leads() {
                out.lead_mut(l)[start..start + span].fill(0.0);
            }
            trace.masked.push((start, span));
        }
    }

    if cfg.lead_dropout_p > 0.0 {
        for l in 0..out.leads() {
            if rng.random::<f64>() < cfg.lead_dropout_p {
                out.lead_mut(l).fill(0.0);
                trace.dropped[l] = true;
            }
        }
    }

    Ok((out, trace))
}

/// Two views of one (or two paired) signals with seeds derived from
/// `(seed, 0)` and `(seed, 1)`.
pub fn sample_view_pair(signal: &Signal, cfg: &AugmentConfig, seed: u64) -> Result<(Signal, Signal)> {
    Ok((
        augment_view(signal, cfg, derive_seed(&[seed, 0]))?,
        augment_view(signal, cfg, derive_seed(&[seed, 1]))?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{LEADS, SAMPLES};

    fn test_signal() -> Signal {
        let data = (0..LEADS * SAMPLES)
            .map(|i| {
                let (l, t) = (i / SAMPLES, i % SAMPLES);
                1.0 + 0.5 * l as f64 + math::sin(t as f64 * 0.013 * (l + 1) as f64)
            })
            .collect();
        Signal::new(LEADS, SAMPLES, data).unwrap()
    }

    #[test]
    fn identity_config_returns_input() {
        let s = test_signal();
        let out = augment_view(&s, &AugmentConfig::identity(), 99).unwrap();
        assert_eq!(out, s);
        let (a, b) = sample_view_pair(&s, &AugmentConfig::identity(), 3).unwrap();
        assert_eq!(a, s);
        assert_eq!(b, s);
    }

    #[test]
    fn full_period_shift_is_identity() {
        let s = test_signal();
        assert_eq!(circular_shift(&s, SAMPLES as i64), s);
        assert_eq!(circular_shift(&circular_shift(&s, 17), -17), s);
        assert_eq!(circular_shift(&s, 1).lead(0)[1], s.lead(0)[0]);
    }

    #[test]
    fn noise_variance_matches_sigma() {
        let s = test_signal();
        let cfg = AugmentConfig { noise_sigma: 0.1, ..AugmentConfig::identity() };
        let out = augment_view(&s, &cfg, 5).unwrap();
        for l in 0..LEADS {
            let diff: Vec<f64> = out.lead(l).iter().zip(s.lead(l)).map(|(a, b)| a - b).collect();
            let var = math::std_dev(&diff).powi(2);
            let want = (0.1 * math::std_dev(s.lead(l))).powi(2);
            assert!((var / want - 1.0).abs() < 0.05, "lead {l}: {var} vs {want}");
        }
    }

    #[test]
    fn masked_spans_are_exact_zeros() {
        let s = test_signal();
        let cfg = AugmentConfig { mask_fraction: 0.07, mask_spans: 3, ..AugmentConfig::identity() };
        for seed in 0..20 {
            let (out, trace) = augment_view_traced(&s, &cfg, seed).unwrap();
            assert_eq!(trace.masked.len(), 3);
            let zeros = out.data().iter().filter(|&&v| v == 0.0).count();
            assert_eq!(zeros, 3 * 350 * LEADS);
            for w in trace.masked.windows(2) {
                assert!(w[0].0 + w[0].1 <= w[1].0);
            }
        }
    }

    #[test]
    fn full_dropout_zeroes_everything() {
        let cfg = AugmentConfig { lead_dropout_p: 1.0, ..AugmentConfig::default() };
        let out = augment_view(&test_signal(), &cfg, 1).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn views_are_deterministic_and_distinct() {
        let s = test_signal();
        let cfg = AugmentConfig::default();
        assert_eq!(sample_view_pair(&s, &cfg, 11).unwrap(), sample_view_pair(&s, &cfg, 11).unwrap());
        for seed in 0..100 {
            let (a, b) = sample_view_pair(&s, &cfg, seed).unwrap();
            let d = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(d > 0.0, "seed {seed}");
        }
    }

    #[test]
    fn oversized_masks_rejected() {
        let cfg = AugmentConfig { mask_fraction: 0.6, mask_spans: 2, ..AugmentConfig::identity() };
        assert!(matches!(cfg.validate(SAMPLES), Err(Error::Config(_))));
    }
}
