//! Record model, the deterministic synthetic ECG generator, and
//! patient-level splitting.
//!
//! Each synthetic patient carries a latent scalar disease state that drifts
//! linearly over the observation window. A record is rendered as a train of
//! Gaussian P / QRS / T bumps whose widths and spacing are functions of the
//! state at that record's timestamp, projected onto twelve leads through a
//! patient-specific gain pattern, plus baseline wander and sensor noise.
//! Each patient also has a resting RR offset unrelated to the state.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::rng::{normal, rng_from, Rng};
use crate::signal::Signal;
use crate::{math, Error, Result, LEADS, SAMPLES, SAMPLE_RATE_HZ};

/// Regression target names in head order.
pub const DURATION_NAMES: [&str; 4] = ["p_ms", "qrs_ms", "t_ms", "rr_ms"];
/// Classification target names in head order.
pub const RHYTHM_NAMES: [&str; 2] = ["af", "ste"];

/// Probability that the generator hides a duration target.
pub const TARGET_MASK_PROB: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TaskLabels {
    pub af: Option<bool>,
    pub ste: Option<bool>,
    /// `p_ms, qrs_ms, t_ms, rr_ms`; `None` means masked absent.
    pub durations_ms: [Option<f64>; 4],
}

impl TaskLabels {
    pub fn present_mask(&self) -> [bool; 4] {
        self.durations_ms.map(|d| d.is_some())
    }

    pub fn validate(&self) -> Result<()> {
        for (name, d) in DURATION_NAMES.iter().zip(self.durations_ms) {
            if let Some(v) = d {
                if !(v.is_finite() && v > 0.0) {
                    return Err(Error::Validation(format!("{name} must be finite and > 0, got {v}")));
                }
            }
        }
        Ok(())
    }

    pub fn rhythm(&self) -> [Option<bool>; 2] {
        [self.af, self.ste]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct OutcomeLabel {
    pub mortality: Option<bool>,
    pub heart_failure: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(rename_all = "snake_case"))]
pub enum OutcomeTask {
    Mortality,
    HeartFailure,
}

impl OutcomeTask {
    pub fn select(self, o: &OutcomeLabel) -> Option<bool> {
        match self {
            OutcomeTask::Mortality => o.mortality,
            OutcomeTask::HeartFailure => o.heart_failure,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            OutcomeTask::Mortality => "mortality",
            OutcomeTask::HeartFailure => "heart_failure",
        }
    }
}

/// One 12-lead, 10 s, 500 Hz ECG.
#[derive(Debug, Clone, PartialEq)]
pub struct EcgRecord {
    pub record_id: String,
    pub patient_id: String,
    /// Days since an arbitrary epoch.
    pub timestamp_days: f64,
    signal: Vec<f32>,
    pub labels: Option<TaskLabels>,
    pub outcome: Option<OutcomeLabel>,
}

impl EcgRecord {
    /// Validates shape (12 x 5000, lead-major) and finiteness.
    pub fn new(
        record_id: impl Into<String>,
        patient_id: impl Into<String>,
        timestamp_days: f64,
        signal: Vec<f32>,
        labels: Option<TaskLabels>,
        outcome: Option<OutcomeLabel>,
    ) -> Result<Self> {
        let record_id = record_id.into();
        if signal.len() != LEADS * SAMPLES {
            return Err(Error::shape(
                "ecg_record",
                format!("{record_id}: expected {LEADS}x{SAMPLES} samples, got {}", signal.len()),
            ));
        }
        if let Some(i) = signal.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "{record_id}: non-finite sample at lead {}, index {}",
                i / SAMPLES,
                i % SAMPLES
            )));
        }
        if !timestamp_days.is_finite() {
            return Err(Error::Validation(format!("{record_id}: non-finite timestamp")));
        }
        if let Some(l) = &labels {
            l.validate()?;
        }
        Ok(Self { record_id, patient_id: patient_id.into(), timestamp_days, signal, labels, outcome })
    }

    pub fn signal(&self) -> &[f32] {
        &self.signal
    }

    pub fn lead(&self, i: usize) -> &[f32] {
        &self.signal[i * SAMPLES..(i + 1) * SAMPLES]
    }

    pub fn to_signal(&self) -> Signal {
        // shape checked at construction
        Signal::from_f32(LEADS, SAMPLES, &self.signal).expect("validated record shape")
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(default, deny_unknown_fields))]
pub struct SynthConfig {
    pub n_patients: usize,
    /// Inclusive `[min, max]` records per patient.
    pub ecgs_per_patient: [usize; 2],
    pub day_span: f64,
    pub seed: u64,
    /// Latent disease-state change per day.
    pub drift_rate: f64,
    pub label_noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { n_patients: 256, ecgs_per_patient: [2, 4], day_span: 180.0, seed: 7, drift_rate: 0.005, label_noise: 0.05 }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_patients == 0 {
            return Err(Error::Config("n_patients must be >= 1".into()));
        }
        let [lo, hi] = self.ecgs_per_patient;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!("ecgs_per_patient must satisfy 1 <= min <= max, got [{lo}, {hi}]")));
        }
        if !(self.day_span > 0.0 && self.day_span.is_finite()) {
            return Err(Error::Config(format!("day_span must be > 0, got {}", self.day_span)));
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            return Err(Error::Config(format!("label_noise must lie in [0, 1], got {}", self.label_noise)));
        }
        if !self.drift_rate.is_finite() {
            return Err(Error::Config("drift_rate must be finite".into()));
        }
        Ok(())
    }
}

// Lead templates (mV) for P, R, S and T, loosely following limb + precordial
// polarity in lead order I, II, III, aVR, aVL, aVF, V1..V6.
const P_TEMPLATE: [f64; LEADS] = [0.10, 0.15, 0.05, -0.12, 0.05, 0.10, 0.06, 0.08, 0.09, 0.10, 0.10, 0.08];
const R_TEMPLATE: [f64; LEADS] = [0.9, 1.2, 0.4, -0.9, 0.4, 0.8, 0.3, 0.6, 1.0, 1.3, 1.5, 1.2];
const S_TEMPLATE: [f64; LEADS] = [-0.2, -0.25, -0.15, 0.1, -0.15, -0.2, -0.9, -1.1, -0.7, -0.4, -0.2, -0.15];
const T_TEMPLATE: [f64; LEADS] = [0.25, 0.35, 0.10, -0.28, 0.12, 0.22, 0.10, 0.30, 0.38, 0.42, 0.35, 0.28];
const STE_MV: f64 = 0.12;

// Thresholds on the final latent state for the two outcomes.
const MORTALITY_THRESHOLD: f64 = 1.3;
const HEART_FAILURE_THRESHOLD: f64 = 0.5;
const OUTCOME_STEEPNESS: f64 = 4.0;
/// Spread of the per-patient resting RR offset, independent of the state.
const RR_SPREAD_MS: f64 = 100.0;

/// Generating durations (ms) as functions of the latent state, before the
/// patient's resting RR offset.
pub fn durations_for_state(d: f64) -> [f64; 4] {
    [
        (105.0 + 10.0 * d).clamp(60.0, 180.0),
        (95.0 + 15.0 * d).clamp(60.0, 200.0),
        (190.0 + 25.0 * d).clamp(100.0, 320.0),
        (850.0 - 60.0 * d).clamp(450.0, 1400.0),
    ]
}

/// Thresholded logistic of the final state, before label noise.
pub fn clean_outcome(final_state: f64) -> (bool, bool) {
    let p = |th: f64| math::sigmoid(OUTCOME_STEEPNESS * (final_state - th));
    (p(MORTALITY_THRESHOLD) > 0.5, p(HEART_FAILURE_THRESHOLD) > 0.5)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecordPlan {
    pub record_id: String,
    pub timestamp_days: f64,
    pub latent_state: f64,
    pub af: bool,
    pub ste: bool,
    /// Generating durations, always present.
    pub durations_ms: [f64; 4],
    /// Targets as emitted (masked).
    pub labels: TaskLabels,
    render_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatientPlan {
    pub patient_id: String,
    pub initial_state: f64,
    pub slope_per_day: f64,
    pub final_state: f64,
    pub outcome: OutcomeLabel,
    pub records: Vec<RecordPlan>,
    gains: [[f64; LEADS]; 4],
}

/// Which component of the rendered waveform to synthesize.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Wave {
    P,
    Qrs,
    T,
    StOffset,
}

#[derive(Debug, Clone)]
pub struct SynthGenerator {
    cfg: SynthConfig,
}

impl SynthGenerator {
    pub fn new(cfg: SynthConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &SynthConfig {
        &self.cfg
    }

    /// Latent trajectory, labels and timestamps of patient `idx`; no signal.
    pub fn plan_patient(&self, idx: usize) -> PatientPlan {
        let cfg = &self.cfg;
        let mut rng = rng_from(&[cfg.seed, idx as u64, 0x706c_616e]);
        let patient_id = format!("p{idx:05}");
        let initial_state = normal(&mut rng);
        let slope_per_day = cfg.drift_rate * (1.0 + 0.5 * normal(&mut rng));
        let final_state = initial_state + slope_per_day * cfg.day_span;

        let mut gains = [[0.0; LEADS]; 4];
        for (g, template) in gains.iter_mut().zip([P_TEMPLATE, R_TEMPLATE, S_TEMPLATE, T_TEMPLATE]) {
            for (gl, t) in g.iter_mut().zip(template) {
                *gl = t * (1.0 + 0.5 * normal(&mut rng));
            }
        }

        let rr_offset_ms = RR_SPREAD_MS * normal(&mut rng);

        let (mort, hf) = clean_outcome(final_state);
        let flip = |rng: &mut Rng, y: bool| if rng.random::<f64>() < cfg.label_noise { !y } else { y };
        let outcome = OutcomeLabel { mortality: Some(flip(&mut rng, mort)), heart_failure: Some(flip(&mut rng, hf)) };

        let [lo, hi] = cfg.ecgs_per_patient;
        let n = rng.random_range(lo..=hi);
        let mut times: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * cfg.day_span).collect();
        times.sort_by(f64::total_cmp);

        let records = times
            .into_iter()
            .enumerate()
            .map(|(k, t)| {
                let jitter = cfg.drift_rate * 5.0 * normal(&mut rng);
                let d = initial_state + slope_per_day * t + jitter;
                let af = rng.random::<f64>() < math::sigmoid(2.0 * (d - 1.5));
                let ste = rng.random::<f64>() < math::sigmoid(2.0 * (d - 1.0));
                let mut durations_ms = durations_for_state(d);
                durations_ms[3] = (durations_ms[3] + rr_offset_ms).clamp(450.0, 1400.0);
                let mut shown = [None; 4];
                for (i, s) in shown.iter_mut().enumerate() {
                    let hidden = rng.random::<f64>() < TARGET_MASK_PROB;
                    if !hidden && !(af && i == 0) {
                        *s = Some(durations_ms[i]);
                    }
                }
                RecordPlan {
                    record_id: format!("{patient_id}_e{k:02}"),
                    timestamp_days: t,
                    latent_state: d,
                    af,
                    ste,
                    durations_ms,
                    labels: TaskLabels { af: Some(af), ste: Some(ste), durations_ms: shown },
                    render_seed: rng.random(),
                }
            })
            .collect();

        PatientPlan { patient_id, initial_state, slope_per_day, final_state, outcome, records, gains }
    }

    pub fn plans(&self) -> impl Iterator<Item = PatientPlan> + '_ {
        (0..self.cfg.n_patients).map(|i| self.plan_patient(i))
    }

    /// Beat onsets (s) for a record.
    fn beat_times(&self, rec: &RecordPlan, rng: &mut Rng) -> Vec<f64> {
        let rr = rec.durations_ms[3] / 1000.0;
        let irregularity = if rec.af { 0.15 } else { 0.02 };
        let mut t = -rng.random::<f64>() * rr;
        let mut beats = Vec::new();
        let end = SAMPLES as f64 / SAMPLE_RATE_HZ + 1.0;
        while t < end {
            beats.push(t);
            t += (rr * (1.0 + irregularity * normal(rng))).max(0.3);
        }
        beats
    }

    /// One component of a record's waveform, all leads, without noise or wander.
    pub fn render_wave(&self, patient: &PatientPlan, rec: &RecordPlan, wave: Wave) -> Signal {
        let mut rng = rng_from(&[rec.render_seed, 0x6265_6174]);
        let beats = self.beat_times(rec, &mut rng);
        let mut out = Signal::zeros(LEADS, SAMPLES);
        let [p_ms, qrs_ms, t_ms, _] = rec.durations_ms.map(|d| d / 1000.0);
        let mut shape = vec![0.0; SAMPLES];
        for &b in &beats {
            match wave {
                Wave::P if !rec.af => {
                    shape.fill(0.0);
                    add_bump(&mut shape, b - 0.16, p_ms / 6.0, 1.0);
                    add_leads(&mut out, &shape, &patient.gains[0]);
                }
                Wave::P => {}
                Wave::Qrs => {
                    shape.fill(0.0);
                    add_bump(&mut shape, b, qrs_ms / 6.0, 1.0);
                    add_leads(&mut out, &shape, &patient.gains[1]);
                    shape.fill(0.0);
                    add_bump(&mut shape, b + qrs_ms / 3.0, qrs_ms / 12.0, 1.0);
                    add_leads(&mut out, &shape, &patient.gains[2]);
                }
                Wave::T => {
                    shape.fill(0.0);
                    add_bump(&mut shape, b + qrs_ms / 2.0 + 0.08 + t_ms / 2.0, t_ms / 6.0, 1.0);
                    add_leads(&mut out, &shape, &patient.gains[3]);
                }
                Wave::StOffset if rec.ste => {
                    shape.fill(0.0);
                    add_plateau(&mut shape, b + qrs_ms / 2.0, b + qrs_ms / 2.0 + 0.08 + t_ms / 2.0, STE_MV);
                    // elevation follows the R polarity
                    let sign = patient.gains[1].map(|g| if g >= 0.0 { 1.0 } else { -1.0 });
                    add_leads(&mut out, &shape, &sign);
                }
                Wave::StOffset => {}
            }
        }
        out
    }

    /// Full record: all waves, baseline wander, sensor noise.
    pub fn render(&self, patient: &PatientPlan, rec: &RecordPlan) -> EcgRecord {
        let mut sig = Signal::zeros(LEADS, SAMPLES);
        for wave in [Wave::P, Wave::Qrs, Wave::T, Wave::StOffset] {
            let w = self.render_wave(patient, rec, wave);
            for (a, b) in sig.data_mut().iter_mut().zip(w.data()) {
                *a += b;
            }
        }
        let mut rng = rng_from(&[rec.render_seed, 0x6e6f_6973]);
        let amp = 0.05 + 0.15 * rng.random::<f64>();
        let freq = 0.1 + 0.3 * rng.random::<f64>();
        for l in 0..LEADS {
            let phase = rng.random::<f64>() * 2.0 * PI;
            for (i, v) in sig.lead_mut(l).iter_mut().enumerate() {
                let t = i as f64 / SAMPLE_RATE_HZ;
                *v += amp * math::sin(2.0 * PI * freq * t + phase) + 0.015 * normal(&mut rng);
            }
        }
        EcgRecord {
            record_id: rec.record_id.clone(),
            patient_id: patient.patient_id.clone(),
            timestamp_days: rec.timestamp_days,
            signal: sig.to_f32(),
            labels: Some(rec.labels),
            outcome: Some(patient.outcome),
        }
    }

    /// Every record, patient by patient, in id order.
    pub fn records(&self) -> impl Iterator<Item = EcgRecord> + '_ {
        self.plans().flat_map(move |p| {
            let recs: Vec<EcgRecord> = p.records.iter().map(|r| self.render(&p, r)).collect();
            recs
        })
    }
}

fn add_bump(buf: &mut [f64], center_s: f64, sigma_s: f64, amp: f64) {
    let c = center_s * SAMPLE_RATE_HZ;
    let sd = sigma_s * SAMPLE_RATE_HZ;
    let lo = math::floor(c - 5.0 * sd).max(0.0) as usize;
    let hi = ((c + 5.0 * sd) as isize + 1).clamp(0, buf.len() as isize) as usize;
    for (i, v) in buf.iter_mut().enumerate().take(hi).skip(lo) {
        let z = (i as f64 - c) / sd;
        *v += amp * math::exp(-0.5 * z * z);
    }
}

/// Flat offset between `start_s` and `end_s` with 10 ms logistic edges.
fn add_plateau(buf: &mut [f64], start_s: f64, end_s: f64, amp: f64) {
    let edge = 0.01 * SAMPLE_RATE_HZ;
    let (a, b) = (start_s * SAMPLE_RATE_HZ, end_s * SAMPLE_RATE_HZ);
    let lo = (a - 8.0 * edge).max(0.0) as usize;
    let hi = ((b + 8.0 * edge) as isize).clamp(0, buf.len() as isize) as usize;
    for (i, v) in buf.iter_mut().enumerate().take(hi).skip(lo) {
        let x = i as f64;
        *v += amp * math::sigmoid((x - a) / edge) * math::sigmoid((b - x) / edge);
    }
}

fn add_leads(out: &mut Signal, shape: &[f64], gains: &[f64; LEADS]) {
    for (l, g) in gains.iter().enumerate() {
        for (o, s) in out.lead_mut(l).iter_mut().zip(shape) {
            *o += g * s;
        }
    }
}

/// Renders the whole corpus in memory.
pub fn generate_synthetic_corpus(cfg: &SynthConfig) -> Result<Vec<EcgRecord>> {
    Ok(SynthGenerator::new(*cfg)?.records().collect())
}

/// Fractions for a three-way patient split.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(deny_unknown_fields))]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self { train: 0.8, val: 0.1, test: 0.1 }
    }
}

impl SplitFractions {
    pub fn validate(&self) -> Result<()> {
        let s = self.train + self.val + self.test;
        if !(self.train > 0.0 && self.val > 0.0 && self.test > 0.0) || math::abs(s - 1.0) > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions must be positive and sum to 1, got ({}, {}, {})",
                self.train, self.val, self.test
            )));
        }
        Ok(())
    }
}

/// Assigns whole patients to train / val / test and returns record indices
/// for each split, preserving input order within a split.
pub fn split_by_patient<'a>(
    patient_ids: impl IntoIterator<Item = &'a str>,
    fractions: SplitFractions,
    seed: u64,
) -> Result<[Vec<usize>; 3]> {
    fractions.validate()?;
    let ids: Vec<&str> = patient_ids.into_iter().collect();
    let mut patients: Vec<&str> = ids.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let n = patients.len();
    if n < 3 {
        return Err(Error::Batch(format!("{n} patients cannot fill three splits")));
    }
    patients.shuffle(&mut rng_from(&[seed, 0x7370_6c69]));
    let mut n_val = (math::round(fractions.val * n as f64) as usize).max(1);
    let mut n_test = (math::round(fractions.test * n as f64) as usize).max(1);
    while n_val + n_test >= n {
        if n_val >= n_test && n_val > 1 {
            n_val -= 1;
        } else if n_test > 1 {
            n_test -= 1;
        } else {
            break;
        }
    }
    let n_train = n - n_val - n_test;
    let mut assign = alloc::collections::BTreeMap::new();
    for (i, p) in patients.iter().enumerate() {
        let split = if i < n_train {
            0
        } else if i < n_train + n_val {
            1
        } else {
            2
        };
        assign.insert(*p, split);
    }
    let mut out: [Vec<usize>; 3] = Default::default();
    for (i, p) in ids.iter().enumerate() {
        out[assign[p]].push(i);
    }
    Ok(out)
}

/// [`split_by_patient`] over owned records.
pub fn split_records(records: Vec<EcgRecord>, fractions: SplitFractions, seed: u64) -> Result<[Vec<EcgRecord>; 3]> {
    let idx = split_by_patient(records.iter().map(|r| r.patient_id.as_str()), fractions, seed)?;
    let mut which = vec![0u8; records.len()];
    for (s, list) in idx.iter().enumerate() {
        for &i in list {
            which[i] = s as u8;
        }
    }
    let mut out: [Vec<EcgRecord>; 3] = Default::default();
    for (r, s) in records.into_iter().zip(which) {
        out[s as usize].push(r);
    }
    Ok(out)
}
