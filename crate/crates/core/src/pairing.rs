use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::rng::{derive_seed, rng_from};
use crate::{math, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(default, deny_unknown_fields))]
pub struct PairingConfig {
    pub window_days: f64,
    pub fallback_self_pair: bool,
}

impl Default for PairingConfig {
    fn default() -> Self {
        Self { window_days: 60.0, fallback_self_pair: true }
    }
}

impl PairingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.window_days > 0.0 && self.window_days.is_finite()) {
            return Err(Error::Config(format!("window_days must be > 0, got {}", self.window_days)));
        }
        Ok(())
    }
}

/// The minimal view of a record that pairing needs.
pub trait Timed {
    fn patient(&self) -> &str;
    fn day(&self) -> f64;
}

impl Timed for crate::corpus::EcgRecord {
    fn patient(&self) -> &str {
        &self.patient_id
    }
    fn day(&self) -> f64 {
        self.timestamp_days
    }
}

impl<S: AsRef<str>> Timed for (S, f64) {
    fn patient(&self) -> &str {
        self.0.as_ref()
    }
    fn day(&self) -> f64 {
        self.1
    }
}

/// Positive pairs grouped by patient. Indices refer to the slice passed to
/// [`build_pair_index`].
#[derive(Debug, Clone, PartialEq)]
pub struct PairIndex {
    pairs: Vec<(usize, usize)>,
    by_patient: BTreeMap<String, Vec<usize>>,
    singletons: BTreeMap<String, usize>,
    fallback_self_pair: bool,
}

impl PairIndex {
    /// All pairs `(i, j)`, `i < j`, sorted.
    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    /// Positions into [`pairs`](Self::pairs) for each patient with at least
    /// one pair.
    pub fn patient_pairs(&self) -> &BTreeMap<String, Vec<usize>> {
        &self.by_patient
    }

    /// Patients without an in-window partner, with the record used for a
    /// self-pair (their earliest).
    pub fn singletons(&self) -> &BTreeMap<String, usize> {
        &self.singletons
    }

    pub fn fallback_self_pair(&self) -> bool {
        self.fallback_self_pair
    }

    /// Patients that can contribute to a batch.
    pub fn eligible_patients(&self) -> usize {
        self.by_patient.len() + if self.fallback_self_pair { self.singletons.len() } else { 0 }
    }

    /// `|P|` plus self-pairs when the fallback is on.
    pub fn effective_pairs(&self) -> usize {
        self.pairs.len() + if self.fallback_self_pair { self.singletons.len() } else { 0 }
    }

    /// Batches per epoch.
    pub fn batches_per_epoch(&self, batch_pairs: usize) -> usize {
        self.effective_pairs().checked_div(batch_pairs).unwrap_or(0)
    }
}

pub fn build_pair_index<T: Timed>(records: &[T], cfg: &PairingConfig) -> PairIndex {
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        groups.entry(r.patient()).or_default().push(i);
    }
    let mut pairs = Vec::new();
    let mut singletons = BTreeMap::new();
    for (pid, idx) in &groups {
        let before = pairs.len();
        for (a, &i) in idx.iter().enumerate() {
            for &j in &idx[a + 1..] {
                if math::abs(records[i].day() - records[j].day()) <= cfg.window_days {
                    pairs.push((i, j));
                }
            }
        }
        if pairs.len() == before {
            let first = idx
                .iter()
                .copied()
                .min_by(|&a, &b| records[a].day().total_cmp(&records[b].day()).then(a.cmp(&b)))
                .expect("group is non-empty");
            singletons.insert(String::from(*pid), first);
        }
    }
    pairs.sort_unstable();
    let mut by_patient: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (p, &(i, _)) in pairs.iter().enumerate() {
        by_patient.entry(String::from(records[i].patient())).or_default().push(p);
    }
    PairIndex { pairs, by_patient, singletons, fallback_self_pair: cfg.fallback_self_pair }
}

/// Position of the positive partner of example `k` in a batch of `n`.
pub fn positive_index(k: usize, n: usize) -> Result<usize> {
    if k >= n || !n.is_multiple_of(2) {
        return Err(Error::Index { index: k, len: n });
    }
    Ok(k ^ 1)
}

/// One batch of `2 * pairs` record indices, interleaved so that positions
/// `2m` and `2m + 1` are positives. Self-pairs repeat the same record.
pub fn sample_batch(index: &PairIndex, pairs: usize, seed: u64) -> Result<Vec<usize>> {
    if pairs == 0 {
        return Err(Error::Batch("batch must hold at least one pair".into()));
    }
    let eligible = index.eligible_patients();
    if pairs > eligible {
        return Err(Error::Batch(format!("{pairs} pairs requested but only {eligible} eligible patients")));
    }
    let mut rng = rng_from(&[seed, 0x7061_6972]);
    let mut choices: Vec<(usize, bool)> = (0..index.by_patient.len()).map(|p| (p, false)).collect();
    if index.fallback_self_pair {
        choices.extend((0..index.singletons.len()).map(|p| (p, true)));
    }
    let (picked, _) = choices.partial_shuffle(&mut rng, pairs);
    let paired: Vec<&Vec<usize>> = index.by_patient.values().collect();
    let single: Vec<usize> = index.singletons.values().copied().collect();
    let mut out = Vec::with_capacity(2 * pairs);
    for &(p, is_single) in picked.iter() {
        if is_single {
            out.push(single[p]);
            out.push(single[p]);
        } else {
            let options = paired[p];
            let (i, j) = index.pairs[options[rng.random_range(0..options.len())]];
            if rng.random::<bool>() {
                out.extend([i, j]);
            } else {
                out.extend([j, i]);
            }
        }
    }
    Ok(out)
}

/// Batch `b` of epoch `epoch`; pure in its arguments.
pub fn epoch_batch(index: &PairIndex, pairs: usize, seed: u64, epoch: u64, b: u64) -> Result<Vec<usize>> {
    sample_batch(index, pairs, derive_seed(&[seed, epoch, b]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::collections::BTreeSet;
    use alloc::string::ToString;
    use alloc::vec;
    use proptest::prelude::*;

    fn recs(v: &[(&str, f64)]) -> Vec<(String, f64)> {
        v.iter().map(|&(p, t)| (p.to_string(), t)).collect()
    }

    fn brute(records: &[(String, f64)], w: f64) -> Vec<(usize, usize)> {
        let mut out = vec![];
        for i in 0..records.len() {
            for j in i + 1..records.len() {
                let d = records[i].1 - records[j].1;
                if records[i].0 == records[j].0 && d.abs() <= w {
                    out.push((i, j));
                }
            }
        }
        out
    }

    #[test]
    fn window_example() {
        let r = recs(&[("a", 0.0), ("a", 30.0), ("a", 100.0)]);
        let idx = build_pair_index(&r, &PairingConfig::default());
        assert_eq!(idx.pairs(), &[(0, 1)]);
        assert!(idx.singletons().is_empty());
    }

    #[test]
    fn different_patients_never_pair() {
        let r = recs(&[("a", 0.0), ("b", 1.0)]);
        let idx = build_pair_index(&r, &PairingConfig::default());
        assert!(idx.pairs().is_empty());
        assert_eq!(idx.singletons().len(), 2);
    }

    #[test]
    fn boundary_is_inclusive() {
        let r = recs(&[("a", 10.0), ("a", 70.0)]);
        assert_eq!(build_pair_index(&r, &PairingConfig::default()).pairs(), &[(0, 1)]);
    }

    #[test]
    fn positive_index_examples() {
        assert_eq!(positive_index(0, 8).unwrap(), 1);
        assert_eq!(positive_index(1, 8).unwrap(), 0);
        assert_eq!(positive_index(6, 8).unwrap(), 7);
        assert!(matches!(positive_index(8, 8), Err(Error::Index { index: 8, len: 8 })));
    }

    #[test]
    fn minimal_batch() {
        let r = recs(&[("a", 0.0), ("a", 5.0), ("b", 0.0)]);
        let idx = build_pair_index(&r, &PairingConfig::default());
        for seed in 0..20 {
            let b = sample_batch(&idx, 1, seed).unwrap();
            assert_eq!(b.len(), 2);
            let same = b[0] == b[1];
            let pair = idx.pairs().contains(&(b[0].min(b[1]), b[0].max(b[1])));
            assert!(same || pair);
        }
    }

    #[test]
    fn too_few_patients() {
        let r = recs(&[("a", 0.0), ("a", 5.0), ("b", 0.0)]);
        let idx = build_pair_index(&r, &PairingConfig::default());
        assert!(matches!(sample_batch(&idx, 3, 0), Err(Error::Batch(_))));
        let strict = build_pair_index(&r, &PairingConfig { fallback_self_pair: false, ..Default::default() });
        assert!(matches!(sample_batch(&strict, 2, 0), Err(Error::Batch(_))));
        assert_eq!(strict.batches_per_epoch(1), 1);
    }

    #[test]
    fn batch_of_32_from_64_patients() {
        let mut r = vec![];
        for p in 0..64 {
            for k in 0..3 {
                r.push((format!("p{p}"), 20.0 * k as f64));
            }
        }
        let idx = build_pair_index(&r, &PairingConfig::default());
        for seed in 0..100 {
            let b = sample_batch(&idx, 32, seed).unwrap();
            assert_eq!(b.len(), 64);
            let patients: BTreeSet<&str> = b.chunks(2).map(|c| r[c[0]].0.as_str()).collect();
            assert_eq!(patients.len(), 32);
            for c in b.chunks(2) {
                assert_ne!(c[0], c[1]);
                assert_eq!(r[c[0]].0, r[c[1]].0);
            }
        }
        assert_eq!(sample_batch(&idx, 32, 5).unwrap(), sample_batch(&idx, 32, 5).unwrap());
    }

    proptest! {
        #[test]
        fn index_matches_brute_force(
            raw in prop::collection::vec((0u8..40, 0.0f64..400.0), 0..300),
            w in 1.0f64..120.0,
        ) {
            let r: Vec<(String, f64)> = raw.iter().map(|&(p, t)| (format!("p{p}"), t)).collect();
            let idx = build_pair_index(&r, &PairingConfig { window_days: w, fallback_self_pair: true });
            let want = brute(&r, w);
            prop_assert_eq!(idx.pairs(), want.as_slice());
            for (pid, &rec) in idx.singletons() {
                prop_assert_eq!(&r[rec].0, pid);
                prop_assert!(!idx.pairs().iter().any(|&(i, _)| &r[i].0 == pid));
            }
        }

        #[test]
        fn positive_index_is_involution(half in 1usize..500, k in 0usize..1000) {
            let n = 2 * half;
            let k = k % n;
            prop_assert_eq!(positive_index(positive_index(k, n).unwrap(), n).unwrap(), k);
        }

        #[test]
        fn batches_respect_pairs_and_patients(
            raw in prop::collection::vec((0u8..30, 0.0f64..300.0), 1..200),
            seed in any::<u64>(),
            frac in 0.0f64..1.0,
        ) {
            let r: Vec<(String, f64)> = raw.iter().map(|&(p, t)| (format!("p{p}"), t)).collect();
            let idx = build_pair_index(&r, &PairingConfig::default());
            let b = ((idx.eligible_patients() as f64 * frac) as usize).max(1);
            let batch = sample_batch(&idx, b, seed).unwrap();
            prop_assert_eq!(batch.len(), 2 * b);
            let mut seen = BTreeSet::new();
            for c in batch.chunks(2) {
                let key = (c[0].min(c[1]), c[0].max(c[1]));
                prop_assert!(c[0] == c[1] || idx.pairs().binary_search(&key).is_ok());
                prop_assert!(seen.insert(r[c[0]].0.clone()));
            }
        }
    }
}
