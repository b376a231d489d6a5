//! Checkpoint files: a magic line, a one-line JSON header holding the
//! configs, metadata and tensor table, then each tensor's values as
//! little-endian f64 in table order.

use std::fs;
use std::path::Path;

use ecgssl_core::autodiff::{ParamStore, Tensor};
use ecgssl_core::model::{Checkpoint, CheckpointHeader, CHECKPOINT_VERSION};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const MAGIC: &[u8] = b"ECGSSL-CHECKPOINT\n";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileHeader {
    checkpoint: CheckpointHeader,
    tensors: Vec<TensorEntry>,
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let tensors = ckpt
        .params
        .iter()
        .map(|(name, p)| TensorEntry { name: name.into(), shape: p.tensor.shape().to_vec(), trainable: p.trainable })
        .collect();
    let header = FileHeader { checkpoint: ckpt.header.clone(), tensors };
    let mut out = MAGIC.to_vec();
    serde_json::to_writer(&mut out, &header).expect("checkpoint header serializes");
    out.push(b'\n');
    for (_, p) in ckpt.params.iter() {
        for v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Parses checkpoint bytes; `path` only labels errors.
pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let err = |msg: String| Error::format(path, msg);
    let rest = bytes.strip_prefix(MAGIC).ok_or_else(|| err("not a checkpoint file (bad magic line)".into()))?;
    let nl = rest.iter().position(|&b| b == b'\n').ok_or_else(|| err("corrupt header: no line terminator".into()))?;
    let (head, body) = (&rest[..nl], &rest[nl + 1..]);
    let value: serde_json::Value =
        serde_json::from_slice(head).map_err(|e| err(format!("corrupt header: {e}")))?;
    match value.pointer("/checkpoint/version").and_then(|v| v.as_u64()) {
        Some(v) if v == CHECKPOINT_VERSION as u64 => {}
        Some(v) => return Err(err(format!("unsupported checkpoint version {v} (expected {CHECKPOINT_VERSION})"))),
        None => return Err(err("corrupt header: missing checkpoint.version".into())),
    }
    let header: FileHeader = serde_json::from_value(value).map_err(|e| err(format!("corrupt header: {e}")))?;

    let mut params = ParamStore::new();
    let mut offset = 0usize;
    for t in &header.tensors {
        let numel = t.shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let need = numel.and_then(|n| n.checked_mul(8)).ok_or_else(|| err(format!("tensor `{}` shape overflows", t.name)))?;
        let remaining = body.len() - offset;
        if remaining < need {
            return Err(err(format!(
                "truncated tensor section: tensor `{}` needs {need} bytes, {remaining} remain",
                t.name
            )));
        }
        let data = body[offset..offset + need]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect::<Vec<f64>>();
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(err(format!("tensor `{}` has a non-finite value at index {i}", t.name)));
        }
        offset += need;
        if params.contains(&t.name) {
            return Err(err(format!("duplicate tensor `{}`", t.name)));
        }
        let tensor = Tensor::new(t.shape.clone(), data).map_err(|e| err(format!("tensor `{}`: {e}", t.name)))?;
        params.insert(t.name.clone(), tensor, t.trainable);
    }
    if offset != body.len() {
        return Err(err(format!("{} unexpected bytes after the last tensor", body.len() - offset)));
    }
    let ckpt = Checkpoint { header: header.checkpoint, params };
    ckpt.validate().map_err(|e| err(e.to_string()))?;
    Ok(ckpt)
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(ckpt)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}
