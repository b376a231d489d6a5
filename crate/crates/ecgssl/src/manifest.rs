//! Newline-delimited JSON manifest plus one raw f32 blob per record.

use std::collections::HashSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ecgssl_core::corpus::{EcgRecord, OutcomeLabel, SynthConfig, SynthGenerator, TaskLabels};
use ecgssl_core::{LEADS, SAMPLES};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const BLOB_DIR: &str = "blobs";
pub const BLOB_BYTES: u64 = (LEADS * SAMPLES * 4) as u64;

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub record_id: String,
    pub patient_id: String,
    pub timestamp_days: f64,
    /// Relative to the manifest's directory unless absolute.
    pub blob: String,
    #[serde(default)]
    pub af: Option<bool>,
    #[serde(default)]
    pub ste: Option<bool>,
    #[serde(default)]
    pub p_ms: Option<f64>,
    #[serde(default)]
    pub qrs_ms: Option<f64>,
    #[serde(default)]
    pub t_ms: Option<f64>,
    #[serde(default)]
    pub rr_ms: Option<f64>,
    #[serde(default)]
    pub mortality: Option<bool>,
    #[serde(default)]
    pub heart_failure: Option<bool>,
}

impl ManifestEntry {
    fn labels(&self) -> Option<TaskLabels> {
        let durations_ms = [self.p_ms, self.qrs_ms, self.t_ms, self.rr_ms];
        let any = self.af.is_some() || self.ste.is_some() || durations_ms.iter().any(Option::is_some);
        any.then_some(TaskLabels { af: self.af, ste: self.ste, durations_ms })
    }

    fn outcome(&self) -> Option<OutcomeLabel> {
        let o = OutcomeLabel { mortality: self.mortality, heart_failure: self.heart_failure };
        (o.mortality.is_some() || o.heart_failure.is_some()).then_some(o)
    }

    pub(crate) fn from_record(r: &EcgRecord, blob: String) -> Self {
        let l = r.labels.unwrap_or_default();
        let o = r.outcome.unwrap_or_default();
        let [p_ms, qrs_ms, t_ms, rr_ms] = l.durations_ms;
        Self {
            record_id: r.record_id.clone(),
            patient_id: r.patient_id.clone(),
            timestamp_days: r.timestamp_days,
            blob,
            af: l.af,
            ste: l.ste,
            p_ms,
            qrs_ms,
            t_ms,
            rr_ms,
            mortality: o.mortality,
            heart_failure: o.heart_failure,
        }
    }
}

/// A manifest entry with its blob resolved; the samples are read on demand.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordDescriptor {
    pub entry: ManifestEntry,
    pub blob_path: PathBuf,
}

fn check_blob_size(record_id: &str, path: &Path) -> Result<()> {
    let len = match fs::metadata(path) {
        Ok(m) => m.len(),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::MissingBlob { record_id: record_id.into(), path: path.into() })
        }
        Err(e) => return Err(Error::io(path, e)),
    };
    if len != BLOB_BYTES {
        return Err(ecgssl_core::Error::Shape {
            op: "read_record",
            detail: format!(
                "record {record_id}: blob {} has {len} bytes, expected {BLOB_BYTES} ({LEADS} leads x {SAMPLES} f32)",
                path.display()
            ),
        }
        .into());
    }
    Ok(())
}

fn check_record_id(id: &str) -> std::result::Result<(), String> {
    let ok = !id.is_empty()
        && id != "."
        && id != ".."
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if ok {
        Ok(())
    } else {
        Err(format!("record_id {id:?} must be non-empty and use only [A-Za-z0-9._-]"))
    }
}

/// Parses every line, resolves blob paths and checks blob sizes. Blank
/// lines are skipped; line numbers in errors are 1-based.
pub fn load_manifest(path: &Path) -> Result<Vec<RecordDescriptor>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let parse_err = |msg: String| Error::Parse { path: path.into(), line: i + 1, msg };
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        check_record_id(&entry.record_id).map_err(parse_err)?;
        if !seen.insert(entry.record_id.clone()) {
            return Err(parse_err(format!("duplicate record_id {}", entry.record_id)));
        }
        if !entry.timestamp_days.is_finite() {
            return Err(parse_err("timestamp_days must be finite".into()));
        }
        let blob_path = base.join(&entry.blob);
        check_blob_size(&entry.record_id, &blob_path)?;
        out.push(RecordDescriptor { entry, blob_path });
    }
    Ok(out)
}

/// Loads the blob and validates shape and finiteness.
pub fn read_record(desc: &RecordDescriptor) -> Result<EcgRecord> {
    let e = &desc.entry;
    check_blob_size(&e.record_id, &desc.blob_path)?;
    let bytes = fs::read(&desc.blob_path).map_err(|err| Error::io(&desc.blob_path, err))?;
    let signal = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Ok(EcgRecord::new(&e.record_id, &e.patient_id, e.timestamp_days, signal, e.labels(), e.outcome())?)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes `dir/blobs/<record_id>.f32` and returns its descriptor.
pub fn write_record(record: &EcgRecord, dir: &Path) -> Result<RecordDescriptor> {
    check_record_id(&record.record_id).map_err(|m| Error::Core(ecgssl_core::Error::Validation(m)))?;
    let blob_dir = dir.join(BLOB_DIR);
    fs::create_dir_all(&blob_dir).map_err(|e| Error::io(&blob_dir, e))?;
    let name = format!("{}.f32", record.record_id);
    let blob_path = blob_dir.join(&name);
    let mut bytes = Vec::with_capacity(BLOB_BYTES as usize);
    for v in record.signal() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    write_file(&blob_path, &bytes)?;
    let entry = ManifestEntry::from_record(record, format!("{BLOB_DIR}/{name}"));
    Ok(RecordDescriptor { entry, blob_path })
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut buf = Vec::new();
    for e in entries {
        serde_json::to_writer(&mut buf, e).expect("manifest entries serialize");
        buf.push(b'\n');
    }
    write_file(path, &buf)
}

/// Writes blobs and `manifest.jsonl` under `dir`; returns the manifest path.
pub fn write_corpus<'a>(dir: &Path, records: impl IntoIterator<Item = &'a EcgRecord>) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::new();
    for r in records {
        entries.push(write_record(r, dir)?.entry);
    }
    let path = dir.join(MANIFEST_FILE);
    write_manifest(&path, &entries)?;
    Ok(path)
}

/// Accepts either a manifest file or a directory containing `manifest.jsonl`.
pub fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

pub fn load_corpus(path: &Path) -> Result<Vec<EcgRecord>> {
    load_manifest(&manifest_path(path))?.iter().map(read_record).collect()
}

/// Streams the generator's records to `dir` and returns the manifest
/// entries. Identical configs give identical bytes.
pub fn write_synthetic_corpus(cfg: &SynthConfig, dir: &Path) -> Result<Vec<ManifestEntry>> {
    let generator = SynthGenerator::new(*cfg)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(MANIFEST_FILE);
    let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(file);
    let mut entries = Vec::new();
    for r in generator.records() {
        let e = write_record(&r, dir)?.entry;
        serde_json::to_writer(&mut w, &e).expect("manifest entries serialize");
        w.write_all(b"\n").map_err(|err| Error::io(&path, err))?;
        entries.push(e);
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(entries)
}
