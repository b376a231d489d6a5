use std::collections::BTreeSet;

use ecgssl_core::corpus::{generate_synthetic_corpus, split_by_patient, split_records, SplitFractions, SynthConfig};
use proptest::prelude::*;

fn small() -> SynthConfig {
    SynthConfig { n_patients: 12, ..SynthConfig::default() }
}

#[test]
fn generator_is_deterministic() {
    let a = generate_synthetic_corpus(&small()).unwrap();
    let b = generate_synthetic_corpus(&small()).unwrap();
    assert_eq!(a, b);
    let c = generate_synthetic_corpus(&SynthConfig { seed: 8, ..small() }).unwrap();
    assert_ne!(a[0].signal(), c[0].signal());
}

#[test]
fn split_keeps_every_record_once() {
    let records = generate_synthetic_corpus(&small()).unwrap();
    let n = records.len();
    let parts = split_records(records, SplitFractions::default(), 3).unwrap();
    assert_eq!(parts.iter().map(Vec::len).sum::<usize>(), n);
    let ids: BTreeSet<&str> = parts.iter().flatten().map(|r| r.record_id.as_str()).collect();
    assert_eq!(ids.len(), n);
}

proptest! {
    #[test]
    fn split_is_patient_disjoint(
        patients in proptest::collection::vec(0u8..40, 1..300),
        seed in any::<u64>(),
        train in 0.1f64..0.9,
    ) {
        let ids: Vec<String> = patients.iter().map(|p| format!("p{p}")).collect();
        let rest = 1.0 - train;
        let fr = SplitFractions { train, val: rest / 2.0, test: rest / 2.0 };
        let distinct = patients.iter().collect::<BTreeSet<_>>().len();
        let parts = match split_by_patient(ids.iter().map(String::as_str), fr, seed) {
            Ok(p) => p,
            Err(_) => {
                prop_assert!(distinct < 3);
                return Ok(());
            }
        };
        let sets: Vec<BTreeSet<&str>> =
            parts.iter().map(|p| p.iter().map(|&i| ids[i].as_str()).collect()).collect();
        prop_assert!(sets.iter().all(|s| !s.is_empty()));
        for a in 0..3 {
            for b in a + 1..3 {
                prop_assert!(sets[a].is_disjoint(&sets[b]));
            }
        }
        let mut all: Vec<usize> = parts.iter().flatten().copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..ids.len()).collect::<Vec<_>>());
        let again = split_by_patient(ids.iter().map(String::as_str), fr, seed).unwrap();
        prop_assert_eq!(parts, again);
    }
}
