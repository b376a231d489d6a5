//! The metrics table as CSV. Missing values are empty cells; numbers use
//! the shortest representation that parses back to the same f64.

use std::path::Path;

use ecgssl_core::train::{MetricsLog, MetricsRow, Split};

use crate::{Error, Result};

pub const METRICS_HEADER: [&str; 9] =
    ["epoch", "split", "l_ssl", "l_sl", "total", "retrieval_acc", "mean_pos_cos", "mean_neg_cos", "auc"];

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn fields(r: &MetricsRow) -> [Option<f64>; 7] {
    [r.l_ssl, r.l_sl, r.total, r.retrieval_acc, r.mean_pos_cos, r.mean_neg_cos, r.auc]
}

pub fn metrics_csv(log: &[MetricsRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(METRICS_HEADER).expect("in-memory write");
    for r in log {
        let mut rec = vec![r.epoch.to_string(), r.split.name().to_string()];
        rec.extend(fields(r).into_iter().map(cell));
        w.write_record(&rec).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ascii output")
}

pub fn write_metrics(path: &Path, log: &[MetricsRow]) -> Result<()> {
    std::fs::write(path, metrics_csv(log)).map_err(|e| Error::io(path, e))
}

fn parse_split(s: &str) -> Option<Split> {
    match s {
        "train" => Some(Split::Train),
        "val" => Some(Split::Val),
        "test" => Some(Split::Test),
        _ => None,
    }
}

pub fn read_metrics(path: &Path) -> Result<MetricsLog> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let header = rdr.headers().map_err(|e| Error::format(path, e.to_string()))?;
    if header.iter().ne(METRICS_HEADER) {
        return Err(Error::Parse { path: path.into(), line: 1, msg: format!("unexpected header `{}`", header.iter().collect::<Vec<_>>().join(",")) });
    }
    let mut log = MetricsLog::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let bad = |msg: String| Error::Parse { path: path.into(), line, msg };
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let epoch = rec[0].parse().map_err(|_| bad(format!("bad epoch `{}`", &rec[0])))?;
        let split = parse_split(&rec[1]).ok_or_else(|| bad(format!("bad split `{}`", &rec[1])))?;
        let mut vals = [None; 7];
        for (k, v) in vals.iter_mut().enumerate() {
            let s = &rec[k + 2];
            if !s.is_empty() {
                *v = Some(s.parse().map_err(|_| bad(format!("bad {} `{s}`", METRICS_HEADER[k + 2])))?);
            }
        }
        let [l_ssl, l_sl, total, retrieval_acc, mean_pos_cos, mean_neg_cos, auc] = vals;
        log.push(MetricsRow { epoch, split, l_ssl, l_sl, total, retrieval_acc, mean_pos_cos, mean_neg_cos, auc });
    }
    Ok(log)
}
