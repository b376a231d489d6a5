use std::fs;
use std::path::Path;

use ecgssl::checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, MAGIC};
use ecgssl::config::ExperimentConfig;
use ecgssl::manifest::{
    load_corpus, load_manifest, read_record, write_corpus, write_synthetic_corpus, BLOB_BYTES, MANIFEST_FILE,
};
use ecgssl::metrics::{read_metrics, write_metrics, METRICS_HEADER};
use ecgssl::Error;
use ecgssl_core::corpus::{generate_synthetic_corpus, SynthConfig};
use ecgssl_core::model::{init_pretrain_params, Checkpoint, CheckpointKind, ModelConfig};
use ecgssl_core::train::{MetricsRow, Split};
use proptest::prelude::*;

fn tiny_corpus(dir: &Path, n: usize) -> Vec<ecgssl_core::corpus::EcgRecord> {
    let records = generate_synthetic_corpus(&SynthConfig { n_patients: n, ..SynthConfig::default() }).unwrap();
    write_corpus(dir, &records).unwrap();
    records
}

#[test]
fn empty_manifest_is_an_empty_corpus() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join(MANIFEST_FILE), "").unwrap();
    assert!(load_corpus(dir.path()).unwrap().is_empty());
}

#[test]
fn manifest_order_is_preserved() {
    let dir = tempfile::tempdir().unwrap();
    let records = tiny_corpus(dir.path(), 1);
    let text = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines.reverse();
    fs::write(dir.path().join(MANIFEST_FILE), lines.join("\n") + "\n\n").unwrap();
    let loaded = load_manifest(&dir.path().join(MANIFEST_FILE)).unwrap();
    let got: Vec<&str> = loaded.iter().map(|d| d.entry.record_id.as_str()).collect();
    let want: Vec<&str> = records.iter().rev().map(|r| r.record_id.as_str()).collect();
    assert_eq!(got, want);
}

#[test]
fn eleven_lead_blob_is_a_shape_error() {
    let dir = tempfile::tempdir().unwrap();
    let records = tiny_corpus(dir.path(), 1);
    let blob = dir.path().join(format!("blobs/{}.f32", records[0].record_id));
    let bytes = fs::read(&blob).unwrap();
    fs::write(&blob, &bytes[..bytes.len() * 11 / 12]).unwrap();
    let e = load_manifest(&dir.path().join(MANIFEST_FILE)).unwrap_err();
    assert!(matches!(e, Error::Core(ecgssl_core::Error::Shape { .. })), "{e}");
    assert!(e.to_string().contains(&format!("{} bytes", BLOB_BYTES * 11 / 12)), "{e}");
}

#[test]
fn unknown_and_duplicate_manifest_entries_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    tiny_corpus(dir.path(), 1);
    let path = dir.path().join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).unwrap();
    let first = text.lines().next().unwrap().to_string();
    fs::write(&path, format!("{first}\n{first}\n")).unwrap();
    assert!(matches!(load_manifest(&path).unwrap_err(), Error::Parse { line: 2, .. }));
    fs::write(&path, first.replacen('{', "{\"colour\":1,", 1)).unwrap();
    let e = load_manifest(&path).unwrap_err();
    assert!(matches!(e, Error::Parse { line: 1, .. }) && e.to_string().contains("colour"), "{e}");
    fs::write(&path, first.replace("\"record_id\":\"", "\"record_id\":\"../")).unwrap();
    assert!(matches!(load_manifest(&path).unwrap_err(), Error::Parse { line: 1, .. }));
}

#[test]
fn infinite_sample_is_located() {
    let dir = tempfile::tempdir().unwrap();
    let records = tiny_corpus(dir.path(), 1);
    let blob = dir.path().join(format!("blobs/{}.f32", records[0].record_id));
    let mut bytes = fs::read(&blob).unwrap();
    let at = (11 * 5000 + 4999) * 4;
    bytes[at..at + 4].copy_from_slice(&f32::INFINITY.to_le_bytes());
    fs::write(&blob, bytes).unwrap();
    let desc = load_manifest(&dir.path().join(MANIFEST_FILE)).unwrap();
    let e = read_record(&desc[0]).unwrap_err().to_string();
    assert!(e.contains("lead 11") && e.contains("index 4999"), "{e}");
}

#[test]
fn synthetic_corpus_bytes_are_reproducible() {
    let cfg = SynthConfig { n_patients: 4, ..SynthConfig::default() };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ea = write_synthetic_corpus(&cfg, a.path()).unwrap();
    let eb = write_synthetic_corpus(&cfg, b.path()).unwrap();
    assert_eq!(ea, eb);
    assert_eq!(fs::read(a.path().join(MANIFEST_FILE)).unwrap(), fs::read(b.path().join(MANIFEST_FILE)).unwrap());
    for e in &ea {
        assert_eq!(fs::read(a.path().join(&e.blob)).unwrap(), fs::read(b.path().join(&e.blob)).unwrap());
    }
    assert_eq!(load_corpus(a.path()).unwrap(), generate_synthetic_corpus(&cfg).unwrap());
}

fn small_checkpoint() -> Checkpoint {
    let model = ModelConfig::compact();
    let params = init_pretrain_params(&model, 9).unwrap();
    Checkpoint::new(CheckpointKind::Pretrain, model, Default::default(), params)
}

#[test]
fn checkpoint_roundtrip_and_rejections() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.ckpt");
    let ckpt = small_checkpoint();
    save_checkpoint(&ckpt, &path).unwrap();
    let bytes = fs::read(&path).unwrap();
    assert!(bytes.starts_with(MAGIC));
    assert_eq!(load_checkpoint(&path).unwrap(), ckpt);
    assert_eq!(encode_checkpoint(&load_checkpoint(&path).unwrap()), bytes);

    let e = decode_checkpoint(b"NOT-A-CHECKPOINT", &path).unwrap_err();
    assert!(matches!(e, Error::Format { .. }), "{e}");
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(decode_checkpoint(&extra, &path).unwrap_err().to_string().contains("after the last tensor"));
    let first = ckpt.params.names().next().unwrap().to_string();
    let header_end = bytes[MAGIC.len()..].iter().position(|&b| b == b'\n').unwrap() + MAGIC.len() + 1;
    let e = decode_checkpoint(&bytes[..header_end + 3], &path).unwrap_err().to_string();
    assert!(e.contains(&format!("`{first}`")), "{e}");
}

#[test]
fn nan_weight_is_rejected_on_load() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.ckpt");
    let ckpt = small_checkpoint();
    let mut bytes = encode_checkpoint(&ckpt);
    let n = bytes.len();
    bytes[n - 8..].copy_from_slice(&f64::NAN.to_le_bytes());
    fs::write(&path, bytes).unwrap();
    let e = load_checkpoint(&path).unwrap_err().to_string();
    assert!(e.contains("non-finite"), "{e}");
}

#[test]
fn metrics_file_has_fixed_header() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csv");
    write_metrics(&path, &[]).unwrap();
    assert_eq!(fs::read_to_string(&path).unwrap(), METRICS_HEADER.join(",") + "\n");
    assert!(read_metrics(&path).unwrap().is_empty());
    fs::write(&path, METRICS_HEADER.join(",") + "\n0,train,x,,,,,,\n").unwrap();
    assert!(matches!(read_metrics(&path).unwrap_err(), Error::Parse { line: 2, .. }));
}

fn opt() -> impl Strategy<Value = Option<f64>> {
    prop_oneof![Just(None), any::<f64>().prop_filter("finite", |v| v.is_finite()).prop_map(Some)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn metrics_roundtrip_exactly(rows in proptest::collection::vec(
        (0usize..500, 0u8..3, opt(), opt(), opt(), opt(), opt(), opt(), opt()), 0..12)
    ) {
        let log: Vec<MetricsRow> = rows
            .into_iter()
            .map(|(epoch, s, l_ssl, l_sl, total, retrieval_acc, mean_pos_cos, mean_neg_cos, auc)| MetricsRow {
                epoch,
                split: [Split::Train, Split::Val, Split::Test][s as usize],
                l_ssl,
                l_sl,
                total,
                retrieval_acc,
                mean_pos_cos,
                mean_neg_cos,
                auc,
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        write_metrics(&path, &log).unwrap();
        prop_assert_eq!(read_metrics(&path).unwrap(), log);
    }
}

#[test]
fn config_rejects_unknown_keys_and_bad_values() {
    let e = ExperimentConfig::from_toml("[pretrain]\nmax_epoch = 3\n").unwrap_err();
    assert!(matches!(e, Error::Config(_)) && e.to_string().contains("max_epoch"), "{e}");
    let e = ExperimentConfig::from_toml("[corpus.split]\ntrain = 0.9\nval = 0.3\ntest = 0.1\n").unwrap_err();
    assert!(e.to_string().contains("[corpus.split]"), "{e}");
    assert_eq!(e.exit_code(), 1);
}

#[test]
fn config_toml_roundtrip() {
    let cfg = ExperimentConfig::default();
    assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
    let partial = ExperimentConfig::from_toml("seed = 4\n[pairing]\nwindow_days = 30.0\n").unwrap();
    assert_eq!(partial.seed, 4);
    assert_eq!(partial.pairing.window_days, 30.0);
    assert_eq!(partial.model, ModelConfig::default());
}

#[test]
fn shipped_reference_config_is_the_compact_model() {
    let cfg = ExperimentConfig::from_toml(include_str!("../../../configs/reference.toml")).unwrap();
    assert_eq!(cfg.model, ModelConfig::compact());
    assert_eq!(cfg.pretrain.max_epochs, 30);
}
