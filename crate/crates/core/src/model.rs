//! ResNet1D encoder, projection head, task heads, the downstream classifier
//! and the in-memory checkpoint.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{BnUpdate, Graph, ParamStore, Tensor, Var};
use crate::rng::{hash_str, normal, rng_from};
use crate::signal::Signal;
use crate::{math, Error, Result, LEADS};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(default, deny_unknown_fields))]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    pub stem_channels: usize,
    /// One residual block per entry; each stage halves the time axis.
    pub stage_channels: Vec<usize>,
    pub block_kernel: usize,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            in_channels: LEADS,
            stem_kernel: 15,
            stem_stride: 4,
            stem_channels: 32,
            stage_channels: vec![32, 64, 128, 256],
            block_kernel: 7,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

impl EncoderConfig {
    /// A narrow, aggressively strided variant sized for single-core runs.
    pub fn compact() -> Self {
        Self {
            stem_kernel: 16,
            stem_stride: 16,
            stem_channels: 16,
            stage_channels: vec![16, 32, 32, 64],
            ..Self::default()
        }
    }

    pub fn embedding_dim(&self) -> usize {
        self.stage_channels.last().copied().unwrap_or(self.stem_channels)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [self.in_channels, self.stem_kernel, self.stem_stride, self.stem_channels, self.block_kernel];
        if positive.contains(&0) || self.stage_channels.contains(&0) {
            return Err(Error::Config("encoder sizes must all be positive".into()));
        }
        if self.block_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("block_kernel must be odd, got {}", self.block_kernel)));
        }
        if !(self.bn_eps > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config("bn_eps must be > 0 and bn_momentum in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(default, deny_unknown_fields))]
pub struct ProjectorConfig {
    pub hidden_dim: usize,
    pub out_dim: usize,
}

impl Default for ProjectorConfig {
    fn default() -> Self {
        Self { hidden_dim: 256, out_dim: 128 }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(default, deny_unknown_fields))]
pub struct HeadsConfig {
    pub cls_outputs: usize,
    pub reg_outputs: usize,
}

impl Default for HeadsConfig {
    fn default() -> Self {
        Self { cls_outputs: 2, reg_outputs: 4 }
    }
}

/// Hidden widths of the downstream dense network; the output is one logit.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(default, deny_unknown_fields))]
pub struct ClassifierHeadConfig {
    pub hidden: Vec<usize>,
}

impl Default for ClassifierHeadConfig {
    fn default() -> Self {
        Self { hidden: vec![64] }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(default, deny_unknown_fields))]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub projector: ProjectorConfig,
    pub heads: HeadsConfig,
    pub classifier: ClassifierHeadConfig,
}

impl ModelConfig {
    pub fn compact() -> Self {
        Self {
            encoder: EncoderConfig::compact(),
            projector: ProjectorConfig { hidden_dim: 64, out_dim: 32 },
            heads: HeadsConfig::default(),
            classifier: ClassifierHeadConfig { hidden: vec![32] },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.projector.hidden_dim == 0 || self.projector.out_dim == 0 {
            return Err(Error::Config("projector sizes must be positive".into()));
        }
        if self.classifier.hidden.contains(&0) {
            return Err(Error::Config("classifier hidden sizes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running buffers updates are recorded on the graph.
    Train,
    /// Running statistics; a pure function of weights and input.
    Eval,
}

// ---- initialization ----

fn he_normal(shape: Vec<usize>, fan_in: usize, seed: u64, name: &str) -> Tensor {
    let mut rng = rng_from(&[seed, hash_str(name)]);
    let std = math::sqrt(2.0 / fan_in as f64);
    let n = shape.iter().product();
    let data = (0..n).map(|_| std * normal(&mut rng)).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

fn add_conv(store: &mut ParamStore, name: &str, cout: usize, cin: usize, k: usize, bias: bool, seed: u64) {
    let w = format!("{name}.weight");
    store.insert(w.clone(), he_normal(vec![cout, cin, k], cin * k, seed, &w), true);
    if bias {
        store.insert(format!("{name}.bias"), Tensor::zeros(vec![cout]), true);
    }
}

fn add_dense(store: &mut ParamStore, name: &str, fout: usize, fin: usize, bias: bool, seed: u64) {
    let w = format!("{name}.weight");
    store.insert(w.clone(), he_normal(vec![fout, fin], fin, seed, &w), true);
    if bias {
        store.insert(format!("{name}.bias"), Tensor::zeros(vec![fout]), true);
    }
}

fn add_bn(store: &mut ParamStore, name: &str, ch: usize) {
    store.insert(format!("{name}.weight"), Tensor::filled(vec![ch], 1.0), true);
    store.insert(format!("{name}.bias"), Tensor::zeros(vec![ch]), true);
    store.insert(format!("{name}.running_mean"), Tensor::zeros(vec![ch]), false);
    store.insert(format!("{name}.running_var"), Tensor::filled(vec![ch], 1.0), false);
}

pub fn init_encoder(store: &mut ParamStore, cfg: &EncoderConfig, seed: u64) {
    add_conv(store, "encoder.stem.conv", cfg.stem_channels, cfg.in_channels, cfg.stem_kernel, false, seed);
    add_bn(store, "encoder.stem.bn", cfg.stem_channels);
    let mut cin = cfg.stem_channels;
    for (i, &c) in cfg.stage_channels.iter().enumerate() {
        let p = format!("encoder.stage{i}");
        add_conv(store, &format!("{p}.conv1"), c, cin, cfg.block_kernel, false, seed);
        add_bn(store, &format!("{p}.bn1"), c);
        add_conv(store, &format!("{p}.conv2"), c, c, cfg.block_kernel, false, seed);
        add_bn(store, &format!("{p}.bn2"), c);
        add_conv(store, &format!("{p}.shortcut"), c, cin, 1, true, seed);
        cin = c;
    }
}

/// Encoder, projector, task heads and the uncertainty log-variances.
pub fn init_pretrain_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut s = ParamStore::new();
    init_encoder(&mut s, &cfg.encoder, seed);
    let h = cfg.encoder.embedding_dim();
    let pj = &cfg.projector;
    add_dense(&mut s, "projector.fc1", pj.hidden_dim, h, false, seed);
    add_bn(&mut s, "projector.bn1", pj.hidden_dim);
    add_dense(&mut s, "projector.fc2", pj.out_dim, pj.hidden_dim, true, seed);
    add_dense(&mut s, "heads.cls", cfg.heads.cls_outputs, h, true, seed);
    add_dense(&mut s, "heads.reg", cfg.heads.reg_outputs, h, true, seed);
    s.insert("uncertainty.s", Tensor::zeros(vec![cfg.heads.reg_outputs]), true);
    s.insert("uncertainty.r", Tensor::zeros(vec![cfg.heads.cls_outputs]), true);
    Ok(s)
}

pub fn init_classifier_head(store: &mut ParamStore, cfg: &ClassifierHeadConfig, in_dim: usize, seed: u64) {
    let mut fin = in_dim;
    for (i, &w) in cfg.hidden.iter().enumerate() {
        add_dense(store, &format!("classifier.fc{i}"), w, fin, true, seed);
        fin = w;
    }
    add_dense(store, &format!("classifier.fc{}", cfg.hidden.len()), 1, fin, true, seed);
}

// ---- forward ----

fn batch_norm(g: &mut Graph, store: &ParamStore, name: &str, x: Var, mode: Mode, cfg: &EncoderConfig) -> Result<Var> {
    let gamma = g.param(store, &format!("{name}.weight"))?;
    let beta = g.param(store, &format!("{name}.bias"))?;
    let (mean_name, var_name) = (format!("{name}.running_mean"), format!("{name}.running_var"));
    match mode {
        Mode::Train => {
            let (y, stats) = g.batch_norm_train(x, gamma, beta, cfg.bn_eps)?;
            g.push_bn_update(BnUpdate { mean_name, var_name, stats });
            Ok(y)
        }
        Mode::Eval => {
            let rm = store.tensor(&mean_name)?.data();
            let rv = store.tensor(&var_name)?.data();
            g.batch_norm_eval(x, gamma, beta, rm, rv, cfg.bn_eps)
        }
    }
}

fn conv(g: &mut Graph, store: &ParamStore, name: &str, x: Var, bias: bool, stride: usize, pad: usize) -> Result<Var> {
    let w = g.param(store, &format!("{name}.weight"))?;
    let b = if bias { Some(g.param(store, &format!("{name}.bias"))?) } else { None };
    g.conv1d(x, w, b, stride, pad)
}

fn dense(g: &mut Graph, store: &ParamStore, name: &str, x: Var, bias: bool) -> Result<Var> {
    let w = g.param(store, &format!("{name}.weight"))?;
    let b = if bias { Some(g.param(store, &format!("{name}.bias"))?) } else { None };
    g.dense(x, w, b)
}

/// Stacks signals into a `(batch, leads, len)` constant.
pub fn signals_to_input(g: &mut Graph, signals: &[&Signal]) -> Result<Var> {
    let first = signals.first().ok_or_else(|| Error::shape("encode", String::from("empty batch")))?;
    let (leads, len) = (first.leads(), first.len());
    let mut data = Vec::with_capacity(signals.len() * leads * len);
    for s in signals {
        if s.leads() != leads || s.len() != len {
            return Err(Error::shape("encode", format!("{}x{} vs {leads}x{len}", s.leads(), s.len())));
        }
        data.extend_from_slice(s.data());
    }
    g.constant(vec![signals.len(), leads, len], data)
}

/// `(batch, leads, len) -> (batch, embedding_dim)`.
pub fn encode(g: &mut Graph, store: &ParamStore, cfg: &EncoderConfig, x: Var, mode: Mode) -> Result<Var> {
    let sx = g.shape(x);
    if sx.len() != 3 || sx[1] != cfg.in_channels || sx[2] < cfg.stem_kernel {
        return Err(Error::shape(
            "encode",
            format!("input {sx:?}, expected (batch, {}, >= {})", cfg.in_channels, cfg.stem_kernel),
        ));
    }
    let mut h = conv(g, store, "encoder.stem.conv", x, false, cfg.stem_stride, 0)?;
    h = batch_norm(g, store, "encoder.stem.bn", h, mode, cfg)?;
    h = g.relu(h);
    let pad = cfg.block_kernel / 2;
    for i in 0..cfg.stage_channels.len() {
        let p = format!("encoder.stage{i}");
        let mut y = conv(g, store, &format!("{p}.conv1"), h, false, 2, pad)?;
        y = batch_norm(g, store, &format!("{p}.bn1"), y, mode, cfg)?;
        y = g.relu(y);
        y = conv(g, store, &format!("{p}.conv2"), y, false, 1, pad)?;
        y = batch_norm(g, store, &format!("{p}.bn2"), y, mode, cfg)?;
        let skip = conv(g, store, &format!("{p}.shortcut"), h, true, 2, 0)?;
        let sum = g.add(y, skip)?;
        h = g.relu(sum);
    }
    g.global_avg_pool(h)
}

/// `(batch, embedding_dim) -> (batch, out_dim)`, unnormalized.
pub fn project(g: &mut Graph, store: &ParamStore, cfg: &ModelConfig, h: Var, mode: Mode) -> Result<Var> {
    let mut z = dense(g, store, "projector.fc1", h, false)?;
    z = batch_norm(g, store, "projector.bn1", z, mode, &cfg.encoder)?;
    z = g.relu(z);
    dense(g, store, "projector.fc2", z, true)
}

/// Rhythm logits `(batch, 2)` and z-scored durations `(batch, 4)`.
pub fn heads_forward(g: &mut Graph, store: &ParamStore, h: Var) -> Result<(Var, Var)> {
    Ok((dense(g, store, "heads.cls", h, true)?, dense(g, store, "heads.reg", h, true)?))
}

/// Dense network on encoder features, `(batch, in) -> (batch, 1)`.
pub fn classifier_head(g: &mut Graph, store: &ParamStore, cfg: &ClassifierHeadConfig, h: Var) -> Result<Var> {
    let mut y = h;
    for i in 0..cfg.hidden.len() {
        y = dense(g, store, &format!("classifier.fc{i}"), y, true)?;
        y = g.relu(y);
    }
    dense(g, store, &format!("classifier.fc{}", cfg.hidden.len()), y, true)
}

/// Eval-mode embeddings for a list of signals, processed in chunks.
pub fn embed(store: &ParamStore, cfg: &EncoderConfig, signals: &[&Signal], chunk: usize) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(signals.len());
    for part in signals.chunks(chunk.max(1)) {
        let mut g = Graph::new();
        let x = signals_to_input(&mut g, part)?;
        let h = encode(&mut g, store, cfg, x, Mode::Eval)?;
        let d = g.shape(h)[1];
        out.extend(g.value(h).chunks(d).map(<[f64]>::to_vec));
    }
    Ok(out)
}

// ---- checkpoint ----

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(rename_all = "snake_case"))]
pub enum CheckpointKind {
    Pretrain,
    Classifier,
}

/// Training-split mean and std of each regression target.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(deny_unknown_fields))]
pub struct TargetNorm {
    pub mean: [f64; 4],
    pub std: [f64; 4],
}

impl Default for TargetNorm {
    fn default() -> Self {
        Self { mean: [0.0; 4], std: [1.0; 4] }
    }
}

impl TargetNorm {
    pub fn apply(&self, k: usize, v: f64) -> f64 {
        (v - self.mean[k]) / self.std[k]
    }
}

/// Everything a checkpoint carries besides tensor bytes.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(deny_unknown_fields))]
pub struct CheckpointHeader {
    pub version: u32,
    pub kind: CheckpointKind,
    pub model: ModelConfig,
    pub target_norm: TargetNorm,
    /// `s_k` then `r_m`, copied from the parameter tensors for readability.
    pub uncertainty_s: Vec<f64>,
    pub uncertainty_r: Vec<f64>,
    /// Free-form training metadata (seed, best epoch, task, ...).
    pub meta: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn new(kind: CheckpointKind, model: ModelConfig, target_norm: TargetNorm, params: ParamStore) -> Self {
        let read = |n: &str| params.get(n).map(|t| t.data().to_vec()).unwrap_or_default();
        let header = CheckpointHeader {
            version: CHECKPOINT_VERSION,
            kind,
            model,
            target_norm,
            uncertainty_s: read("uncertainty.s"),
            uncertainty_r: read("uncertainty.r"),
            meta: BTreeMap::new(),
        };
        Self { header, params }
    }

    /// Checks the version and that every tensor the header's architecture
    /// implies is present with the right shape.
    pub fn validate(&self) -> Result<()> {
        if self.header.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                self.header.version
            )));
        }
        let mut expect = ParamStore::new();
        init_encoder(&mut expect, &self.header.model.encoder, 0);
        for (name, p) in expect.iter() {
            let t = self
                .params
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if t.shape() != p.tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, architecture expects {:?}",
                    t.shape(),
                    p.tensor.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Downstream model: transferred (or fresh) encoder plus a dense head.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub encoder: EncoderConfig,
    pub head: ClassifierHeadConfig,
    pub params: ParamStore,
    pub freeze_encoder: bool,
}

impl Classifier {
    /// Copies every `encoder.*` tensor from `ckpt` and initializes a new head.
    pub fn from_checkpoint(
        ckpt: &Checkpoint,
        head: ClassifierHeadConfig,
        freeze_encoder: bool,
        seed: u64,
    ) -> Result<Self> {
        ckpt.validate()?;
        let encoder = ckpt.header.model.encoder.clone();
        let mut params = ckpt.params.subset("encoder.");
        init_classifier_head(&mut params, &head, encoder.embedding_dim(), seed);
        let mut c = Self { encoder, head, params, freeze_encoder };
        c.apply_freeze();
        Ok(c)
    }

    /// Same architecture, random encoder, trained end to end.
    pub fn scratch(encoder: EncoderConfig, head: ClassifierHeadConfig, seed: u64) -> Result<Self> {
        encoder.validate()?;
        let mut params = ParamStore::new();
        init_encoder(&mut params, &encoder, seed);
        init_classifier_head(&mut params, &head, encoder.embedding_dim(), seed);
        Ok(Self { encoder, head, params, freeze_encoder: false })
    }

    fn apply_freeze(&mut self) {
        let names: Vec<String> = self.params.names().filter(|n| n.starts_with("encoder.")).map(String::from).collect();
        for n in names {
            let buffer = n.ends_with(".running_mean") || n.ends_with(".running_var");
            self.params.set_trainable(&n, !self.freeze_encoder && !buffer);
        }
    }

    /// Logits `(batch, 1)` for raw signals.
    pub fn forward(&self, g: &mut Graph, signals: &[&Signal], mode: Mode) -> Result<Var> {
        let x = signals_to_input(g, signals)?;
        let enc_mode = if self.freeze_encoder { Mode::Eval } else { mode };
        let h = encode(g, &self.params, &self.encoder, x, enc_mode)?;
        classifier_head(g, &self.params, &self.head, h)
    }

    /// Logits `(batch, 1)` for precomputed encoder features.
    pub fn forward_features(&self, g: &mut Graph, features: &[Vec<f64>]) -> Result<Var> {
        let d = self.encoder.embedding_dim();
        let mut data = Vec::with_capacity(features.len() * d);
        for f in features {
            if f.len() != d {
                return Err(Error::shape("classifier", format!("feature of length {} vs {d}", f.len())));
            }
            data.extend_from_slice(f);
        }
        let h = g.constant(vec![features.len(), d], data)?;
        classifier_head(g, &self.params, &self.head, h)
    }

    pub fn to_checkpoint(&self, target_norm: TargetNorm) -> Checkpoint {
        let model = ModelConfig { encoder: self.encoder.clone(), classifier: self.head.clone(), ..ModelConfig::default() };
        Checkpoint::new(CheckpointKind::Classifier, model, target_norm, self.params.clone())
    }

    /// Restores a classifier saved with [`to_checkpoint`](Self::to_checkpoint).
    pub fn from_classifier_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.validate()?;
        if ckpt.header.kind != CheckpointKind::Classifier {
            return Err(Error::Checkpoint("checkpoint holds a pre-training model, not a classifier".into()));
        }
        let head = ckpt.header.model.classifier.clone();
        let mut expect = ParamStore::new();
        init_classifier_head(&mut expect, &head, ckpt.header.model.encoder.embedding_dim(), 0);
        for (name, p) in expect.iter() {
            match ckpt.params.get(name) {
                Some(t) if t.shape() == p.tensor.shape() => {}
                _ => return Err(Error::Checkpoint(format!("missing or misshapen tensor `{name}`"))),
            }
        }
        Ok(Self {
            encoder: ckpt.header.model.encoder.clone(),
            head,
            params: ckpt.params.clone(),
            freeze_encoder: true,
        })
    }
}
