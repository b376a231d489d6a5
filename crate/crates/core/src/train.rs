//! Pre-training and fine-tuning loops, early stopping and evaluation metrics.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::autodiff::{AdamW, AdamWConfig, Graph, ParamStore, Var};
use crate::corpus::{EcgRecord, OutcomeTask};
use crate::model::{
    embed, encode, heads_forward, init_pretrain_params, project, signals_to_input, Checkpoint, CheckpointKind,
    Classifier, ClassifierHeadConfig, EncoderConfig, Mode, ModelConfig, TargetNorm,
};
use crate::objectives::{self, LossBreakdown, ObjectivesConfig};
use crate::pairing::{build_pair_index, epoch_batch, PairIndex, PairingConfig};
use crate::rng::{derive_seed, rng_from};
use crate::signal::{augment_view, preprocess, AugmentConfig, PreprocessConfig, Signal};
use crate::{math, Error, Result};

// ---- metrics ----

fn unit_rows(z: &[f64], dim: usize) -> Result<Vec<Vec<f64>>> {
    if dim == 0 || !z.len().is_multiple_of(dim) {
        return Err(Error::shape("metrics", format!("{} values with row length {dim}", z.len())));
    }
    let n = z.len() / dim;
    if n < 2 || !n.is_multiple_of(2) {
        return Err(Error::Contract(format!("metrics need an even number of rows >= 2, got {n}")));
    }
    z.chunks(dim)
        .enumerate()
        .map(|(r, row)| {
            let norm = math::sqrt(row.iter().map(|v| v * v).sum());
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::DegenerateEmbedding { row: r });
            }
            Ok(row.iter().map(|v| v / norm).collect())
        })
        .collect()
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Fraction of rows whose positive `k ^ 1` is strictly more similar than
/// every other row. `z` is `(n, dim)` row-major.
pub fn retrieval_accuracy(z: &[f64], dim: usize) -> Result<f64> {
    let u = unit_rows(z, dim)?;
    let n = u.len();
    let hits = (0..n)
        .filter(|&k| {
            let pos = cos(&u[k], &u[k ^ 1]);
            (0..n).filter(|&l| l != k && l != k ^ 1).all(|l| pos > cos(&u[k], &u[l]))
        })
        .count();
    Ok(hits as f64 / n as f64)
}

/// Mean cosine over the positive pairs and over all other unordered pairs.
pub fn cosine_stats(z: &[f64], dim: usize) -> Result<(f64, f64)> {
    let u = unit_rows(z, dim)?;
    let n = u.len();
    let pos = (0..n / 2).map(|m| cos(&u[2 * m], &u[2 * m + 1])).sum::<f64>() / (n / 2) as f64;
    let mut neg = 0.0;
    let mut count = 0usize;
    for i in 0..n {
        for j in i + 1..n {
            if j != (i ^ 1) {
                neg += cos(&u[i], &u[j]);
                count += 1;
            }
        }
    }
    Ok((pos, if count == 0 { 0.0 } else { neg / count as f64 }))
}

/// Every positive-pair cosine and every other unordered-pair cosine, in
/// row order; the inputs to [`cosine_stats`].
pub fn cosine_values(z: &[f64], dim: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let u = unit_rows(z, dim)?;
    let n = u.len();
    let pos = (0..n / 2).map(|m| cos(&u[2 * m], &u[2 * m + 1])).collect();
    let mut neg = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if j != (i ^ 1) {
                neg.push(cos(&u[i], &u[j]));
            }
        }
    }
    Ok((pos, neg))
}

/// Mann–Whitney AUC with ties counted as one half, from mid-ranks.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape("roc_auc", format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::Validation(format!("score {i} is NaN")));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUC needs both classes, got {n_pos} positive and {n_neg} negative"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += order[i..=j].iter().filter(|&&k| labels[k]).count() as f64 * mid;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// `(false positive rate, true positive rate)` points from the highest
/// threshold down, starting at `(0, 0)`.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, f64)>> {
    roc_auc(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l).count() as f64;
    let n_neg = labels.len() as f64 - n_pos;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut pts = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0.0, 0.0);
    for (i, &k) in order.iter().enumerate() {
        if labels[k] {
            tp += 1.0;
        } else {
            fp += 1.0;
        }
        if i + 1 == order.len() || scores[order[i + 1]] != scores[k] {
            pts.push((fp / n_neg, tp / n_pos));
        }
    }
    Ok(pts)
}

// ---- early stopping ----

/// Lower-is-better early stopping.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopState {
    pub best: f64,
    pub best_epoch: Option<usize>,
    pub since_improvement: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub restored_best: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EarlyStopStep {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopState {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        Self { best: f64::INFINITY, best_epoch: None, since_improvement: 0, patience, min_delta, restored_best: false }
    }

    pub fn update(&mut self, epoch: usize, metric: f64) -> EarlyStopStep {
        let improved = metric < self.best - self.min_delta;
        if improved {
            self.best = metric;
            self.best_epoch = Some(epoch);
            self.since_improvement = 0;
        } else {
            self.since_improvement += 1;
        }
        EarlyStopStep { improved, stop: self.since_improvement > self.patience }
    }
}

// ---- metrics log ----

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// One row of the metrics table; absent fields are left empty on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub split: Split,
    pub l_ssl: Option<f64>,
    pub l_sl: Option<f64>,
    pub total: Option<f64>,
    pub retrieval_acc: Option<f64>,
    pub mean_pos_cos: Option<f64>,
    pub mean_neg_cos: Option<f64>,
    pub auc: Option<f64>,
}

impl MetricsRow {
    pub fn empty(epoch: usize, split: Split) -> Self {
        Self {
            epoch,
            split,
            l_ssl: None,
            l_sl: None,
            total: None,
            retrieval_acc: None,
            mean_pos_cos: None,
            mean_neg_cos: None,
            auc: None,
        }
    }

    fn from_breakdown(epoch: usize, split: Split, b: &LossBreakdown) -> Self {
        Self {
            l_ssl: Some(b.l_ssl),
            l_sl: Some(b.l_sl),
            total: Some(b.total),
            retrieval_acc: Some(b.retrieval_acc),
            mean_pos_cos: Some(b.mean_pos_cos),
            mean_neg_cos: Some(b.mean_neg_cos),
            ..Self::empty(epoch, split)
        }
    }
}

pub type MetricsLog = Vec<MetricsRow>;

// ---- shared data prep ----

/// Band-passes and z-scores every record.
pub fn preprocess_records(records: &[EcgRecord], cfg: &PreprocessConfig) -> Result<Vec<Signal>> {
    records
        .iter()
        .map(|r| {
            preprocess(&r.to_signal(), cfg)
                .map_err(|e| Error::Validation(format!("record {}: {e}", r.record_id)))
        })
        .collect()
}

/// Mean and population std of each present duration target.
pub fn target_norm(records: &[EcgRecord]) -> TargetNorm {
    let mut norm = TargetNorm::default();
    for k in 0..4 {
        let vals: Vec<f64> = records
            .iter()
            .filter_map(|r| r.labels.as_ref().and_then(|l| l.durations_ms[k]))
            .collect();
        if !vals.is_empty() {
            norm.mean[k] = math::mean(&vals);
            let sd = math::std_dev(&vals);
            norm.std[k] = if sd > 0.0 { sd } else { 1.0 };
        }
    }
    norm
}

// ---- pre-training ----

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(default, deny_unknown_fields))]
pub struct PretrainConfig {
    pub batch_pairs: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub patience: usize,
    pub min_delta: f64,
    /// Fixed validation batches scored every epoch.
    pub val_batches: usize,
    pub optimizer: AdamWConfig,
    pub model: ModelConfig,
    pub preprocess: PreprocessConfig,
    pub augment: AugmentConfig,
    pub pairing: PairingConfig,
    pub objectives: ObjectivesConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            batch_pairs: 32,
            max_epochs: 30,
            seed: 0,
            patience: 10,
            min_delta: 1e-4,
            val_batches: 4,
            optimizer: AdamWConfig::default(),
            model: ModelConfig::default(),
            preprocess: PreprocessConfig::default(),
            augment: AugmentConfig::default(),
            pairing: PairingConfig::default(),
            objectives: ObjectivesConfig::default(),
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_pairs < 2 {
            return Err(Error::Config(format!("batch_pairs must be >= 2, got {}", self.batch_pairs)));
        }
        if self.max_epochs == 0 || self.val_batches == 0 {
            return Err(Error::Config("max_epochs and val_batches must be >= 1".into()));
        }
        if !(self.min_delta >= 0.0) {
            return Err(Error::Config("min_delta must be >= 0".into()));
        }
        self.optimizer.validate()?;
        self.model.validate()?;
        self.preprocess.validate()?;
        self.augment.validate(crate::SAMPLES)?;
        self.pairing.validate()?;
        self.objectives.validate()
    }
}

/// Preprocessed signals and pair structure of one split.
#[derive(Debug, Clone)]
pub struct PretrainSet {
    signals: Vec<Signal>,
    reg: Vec<[Option<f64>; 4]>,
    cls: Vec<[Option<bool>; 2]>,
    index: PairIndex,
}

impl PretrainSet {
    pub fn new(records: &[EcgRecord], cfg: &PretrainConfig, norm: &TargetNorm) -> Result<Self> {
        let signals = preprocess_records(records, &cfg.preprocess)?;
        let reg = records
            .iter()
            .map(|r| {
                let mut out = [None; 4];
                if let Some(l) = &r.labels {
                    for (k, o) in out.iter_mut().enumerate() {
                        *o = l.durations_ms[k].map(|v| norm.apply(k, v));
                    }
                }
                out
            })
            .collect();
        let cls = records.iter().map(|r| r.labels.as_ref().map_or([None; 2], |l| l.rhythm())).collect();
        Ok(Self { signals, reg, cls, index: build_pair_index(records, &cfg.pairing) })
    }

    pub fn index(&self) -> &PairIndex {
        &self.index
    }

    pub fn signals(&self) -> &[Signal] {
        &self.signals
    }

    pub fn len(&self) -> usize {
        self.signals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.signals.is_empty()
    }
}

#[derive(Debug, Clone, Copy)]
struct ForwardVars {
    total: Var,
    l_ssl: Var,
    l_sl: Var,
    l_reg: Var,
    l_cls: Var,
    z_unit: Var,
}

/// Forward pass of the joint objective on one batch of record indices.
/// Slot `k` is augmented with seed `view_seeds[k]`.
fn objective_forward(
    g: &mut Graph,
    store: &ParamStore,
    set: &PretrainSet,
    batch: &[usize],
    view_seeds: &[u64],
    cfg: &PretrainConfig,
    mode: Mode,
) -> Result<ForwardVars> {
    let views = batch
        .iter()
        .zip(view_seeds)
        .map(|(&i, &s)| augment_view(&set.signals[i], &cfg.augment, s))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&Signal> = views.iter().collect();
    let x = signals_to_input(g, &refs)?;
    let h = encode(g, store, &cfg.model.encoder, x, mode)?;
    let z = project(g, store, &cfg.model, h, mode)?;
    let (cls, reg) = heads_forward(g, store, h)?;

    let z_unit = g.l2_normalize(z)?;
    let l_ssl = g.nt_xent(z_unit, cfg.objectives.nt_xent.temperature)?;
    let (mut rt, mut rm, mut ct, mut cm) = (vec![], vec![], vec![], vec![]);
    for &i in batch {
        for v in set.reg[i] {
            rt.push(v.unwrap_or(0.0));
            rm.push(v.is_some());
        }
        for v in set.cls[i] {
            ct.push(v.map_or(0.0, |b| b as u8 as f64));
            cm.push(v.is_some());
        }
    }
    let l_reg = objectives::masked_huber(g, reg, rt, rm, cfg.objectives.huber_delta)?;
    let l_cls = objectives::bce(g, cls, ct, cm)?;
    let s = g.param(store, "uncertainty.s")?;
    let r = g.param(store, "uncertainty.r")?;
    let l_sl = objectives::weighted_supervised(g, l_reg, l_cls, s, r)?;
    let total = objectives::total_objective(g, l_ssl, l_sl, &cfg.objectives.weights)?;
    Ok(ForwardVars { total, l_ssl, l_sl, l_reg, l_cls, z_unit })
}

fn breakdown(g: &Graph, store: &ParamStore, v: ForwardVars, z_dim: usize) -> Result<LossBreakdown> {
    let ForwardVars { total, l_ssl, l_sl, l_reg, l_cls, z_unit } = v;
    let zv = g.value(z_unit);
    let (pos, neg) = cosine_stats(zv, z_dim)?;
    Ok(LossBreakdown {
        l_ssl: g.scalar(l_ssl)?,
        l_reg: g.value(l_reg).to_vec(),
        l_cls: g.value(l_cls).to_vec(),
        l_sl: g.scalar(l_sl)?,
        total: g.scalar(total)?,
        s: store.tensor("uncertainty.s")?.data().to_vec(),
        r: store.tensor("uncertainty.r")?.data().to_vec(),
        retrieval_acc: retrieval_accuracy(zv, z_dim)?,
        mean_pos_cos: pos,
        mean_neg_cos: neg,
    })
}

fn mean_breakdown(parts: &[LossBreakdown]) -> LossBreakdown {
    let n = parts.len().max(1) as f64;
    let avg = |f: &dyn Fn(&LossBreakdown) -> f64| parts.iter().map(f).sum::<f64>() / n;
    let avg_vec = |f: &dyn Fn(&LossBreakdown) -> &Vec<f64>| {
        let len = parts.first().map_or(0, |p| f(p).len());
        (0..len).map(|k| parts.iter().map(|p| f(p)[k]).sum::<f64>() / n).collect()
    };
    LossBreakdown {
        l_ssl: avg(&|p| p.l_ssl),
        l_reg: avg_vec(&|p| &p.l_reg),
        l_cls: avg_vec(&|p| &p.l_cls),
        l_sl: avg(&|p| p.l_sl),
        total: avg(&|p| p.total),
        s: parts.last().map(|p| p.s.clone()).unwrap_or_default(),
        r: parts.last().map(|p| p.r.clone()).unwrap_or_default(),
        retrieval_acc: avg(&|p| p.retrieval_acc),
        mean_pos_cos: avg(&|p| p.mean_pos_cos),
        mean_neg_cos: avg(&|p| p.mean_neg_cos),
    }
}

const VAL_STREAM: u64 = 0x7661_6c69_6461_7465;

/// Fixed batches (and view seeds) used to score a split in eval mode.
pub fn fixed_batches(index: &PairIndex, batch_pairs: usize, count: usize, seed: u64) -> Result<Vec<(Vec<usize>, Vec<u64>)>> {
    let b = batch_pairs.min(index.eligible_patients());
    if b < 2 {
        return Err(Error::Batch(format!(
            "evaluation needs at least 2 eligible patients, found {}",
            index.eligible_patients()
        )));
    }
    (0..count as u64)
        .map(|i| {
            let batch = epoch_batch(index, b, seed ^ VAL_STREAM, 0, i)?;
            let seeds = (0..batch.len() as u64).map(|k| derive_seed(&[seed, VAL_STREAM, i, k])).collect();
            Ok((batch, seeds))
        })
        .collect()
}

/// Eval-mode embeddings of augmented views for each fixed batch, flattened
/// row-major. `projection` selects the normalized-space input `z` instead
/// of the encoder output `h`; the store must then hold a projector.
pub fn batch_embeddings(
    store: &ParamStore,
    model: &ModelConfig,
    signals: &[Signal],
    batches: &[(Vec<usize>, Vec<u64>)],
    augment: &AugmentConfig,
    projection: bool,
) -> Result<Vec<Vec<f64>>> {
    batches
        .iter()
        .map(|(batch, seeds)| {
            let views = batch
                .iter()
                .zip(seeds)
                .map(|(&i, &s)| augment_view(&signals[i], augment, s))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&Signal> = views.iter().collect();
            let mut g = Graph::new();
            let x = signals_to_input(&mut g, &refs)?;
            let mut y = encode(&mut g, store, &model.encoder, x, Mode::Eval)?;
            if projection {
                y = project(&mut g, store, model, y, Mode::Eval)?;
            }
            Ok(g.value(y).to_vec())
        })
        .collect()
}

/// Eval-mode objective and embedding metrics averaged over fixed batches.
pub fn evaluate_pretrain(
    store: &ParamStore,
    set: &PretrainSet,
    batches: &[(Vec<usize>, Vec<u64>)],
    cfg: &PretrainConfig,
) -> Result<LossBreakdown> {
    let parts = batches
        .iter()
        .map(|(batch, seeds)| {
            let mut g = Graph::new();
            let vars = objective_forward(&mut g, store, set, batch, seeds, cfg, Mode::Eval)?;
            breakdown(&g, store, vars, cfg.model.projector.out_dim)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_breakdown(&parts))
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: MetricsLog,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Joint contrastive and supervised pre-training with early stopping on the
/// validation objective. `on_row` sees every metrics row as it is logged.
pub fn pretrain(
    train: &[EcgRecord],
    val: &[EcgRecord],
    cfg: &PretrainConfig,
    mut on_row: impl FnMut(&MetricsRow),
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let norm = target_norm(train);
    let train_set = PretrainSet::new(train, cfg, &norm)?;
    let val_set = PretrainSet::new(val, cfg, &norm)?;
    if train_set.index.eligible_patients() < cfg.batch_pairs {
        return Err(Error::Batch(format!(
            "training split has {} eligible patients, batch needs {}",
            train_set.index.eligible_patients(),
            cfg.batch_pairs
        )));
    }
    let val_batches = fixed_batches(&val_set.index, cfg.batch_pairs, cfg.val_batches, cfg.seed)?;
    let steps = train_set.index.batches_per_epoch(cfg.batch_pairs).max(1);

    let mut store = init_pretrain_params(&cfg.model, cfg.seed)?;
    cfg.objectives.init_uncertainty(&mut store)?;
    let mut opt = AdamW::new(cfg.optimizer)?;
    let mut stop = EarlyStopState::new(cfg.patience, cfg.min_delta);
    let mut best = store.clone();
    let mut log = MetricsLog::new();
    let mut stopped_early = false;

    for epoch in 0..cfg.max_epochs {
        let mut parts = Vec::with_capacity(steps);
        for b in 0..steps as u64 {
            let batch = epoch_batch(&train_set.index, cfg.batch_pairs, cfg.seed, epoch as u64, b)?;
            let seeds: Vec<u64> =
                (0..batch.len() as u64).map(|k| derive_seed(&[cfg.seed, epoch as u64, b, k])).collect();
            let mut g = Graph::new();
            let vars = objective_forward(&mut g, &store, &train_set, &batch, &seeds, cfg, Mode::Train)
                .map_err(|e| Error::Contract(format!("epoch {epoch}, batch {b}: {e}")))?;
            parts.push(breakdown(&g, &store, vars, cfg.model.projector.out_dim)?);
            store.zero_grad();
            g.backward_into(vars.total, &mut store)?;
            opt.step(&mut store, |_| 1.0)?;
            g.apply_bn_updates(&mut store, cfg.model.encoder.bn_momentum)?;
        }
        let row = MetricsRow::from_breakdown(epoch, Split::Train, &mean_breakdown(&parts));
        on_row(&row);
        log.push(row);

        let v = evaluate_pretrain(&store, &val_set, &val_batches, cfg)?;
        let row = MetricsRow::from_breakdown(epoch, Split::Val, &v);
        on_row(&row);
        log.push(row);

        let step = stop.update(epoch, v.total);
        if step.improved {
            best = store.clone();
        }
        if step.stop {
            stopped_early = true;
            break;
        }
    }
    stop.restored_best = true;
    let best_epoch = stop.best_epoch.unwrap_or(0);
    let mut checkpoint = Checkpoint::new(CheckpointKind::Pretrain, cfg.model.clone(), norm, best);
    checkpoint.header.meta.insert("seed".into(), cfg.seed.to_string());
    checkpoint.header.meta.insert("best_epoch".into(), best_epoch.to_string());
    checkpoint.header.meta.insert("best_val_total".into(), format!("{}", stop.best));
    Ok(PretrainOutcome { checkpoint, log, best_epoch, stopped_early })
}

// ---- fine-tuning ----

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(default, deny_unknown_fields))]
pub struct FinetuneConfig {
    pub task: OutcomeTask,
    /// Scale the positive BCE term by `n_neg / n_pos` of the training set.
    pub pos_weight: bool,
    pub freeze_encoder: bool,
    /// Learning-rate factor for a transferred, unfrozen encoder.
    pub encoder_lr_scale: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub patience: usize,
    pub min_delta: f64,
    /// Cap on labelled training records (earliest ones by patient order).
    pub max_train_records: Option<usize>,
    pub optimizer: AdamWConfig,
    pub head: ClassifierHeadConfig,
    /// Architecture for the from-scratch baseline; must match a checkpoint.
    pub encoder: EncoderConfig,
    pub preprocess: PreprocessConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            task: OutcomeTask::Mortality,
            pos_weight: false,
            freeze_encoder: true,
            encoder_lr_scale: 0.1,
            max_epochs: 100,
            batch_size: 32,
            seed: 0,
            patience: 10,
            min_delta: 1e-4,
            max_train_records: None,
            optimizer: AdamWConfig::default(),
            head: ClassifierHeadConfig::default(),
            encoder: EncoderConfig::default(),
            preprocess: PreprocessConfig::default(),
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("max_epochs and batch_size must be >= 1".into()));
        }
        if !(self.encoder_lr_scale >= 0.0) || !(self.min_delta >= 0.0) {
            return Err(Error::Config("encoder_lr_scale and min_delta must be >= 0".into()));
        }
        if self.max_train_records == Some(0) {
            return Err(Error::Config("max_train_records must be >= 1".into()));
        }
        self.optimizer.validate()?;
        self.encoder.validate()?;
        self.preprocess.validate()
    }
}

/// Earliest record per patient carrying a label for `task`, in patient order.
pub fn select_event_records(records: &[EcgRecord], task: OutcomeTask) -> Vec<usize> {
    let mut first: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        if r.outcome.as_ref().and_then(|o| task.select(o)).is_none() {
            continue;
        }
        first
            .entry(&r.patient_id)
            .and_modify(|j| {
                if r.timestamp_days < records[*j].timestamp_days {
                    *j = i;
                }
            })
            .or_insert(i);
    }
    first.into_values().collect()
}

struct LabelledSet {
    signals: Vec<Signal>,
    labels: Vec<bool>,
    features: Option<Vec<Vec<f64>>>,
}

fn labelled(records: &[EcgRecord], cfg: &FinetuneConfig, cap: Option<usize>, split: Split) -> Result<LabelledSet> {
    let mut idx = select_event_records(records, cfg.task);
    if let Some(c) = cap {
        idx.truncate(c);
    }
    if idx.is_empty() {
        return Err(Error::Validation(format!("{} split has no `{}` labels", split.name(), cfg.task.name())));
    }
    let chosen: Vec<EcgRecord> = idx.iter().map(|&i| records[i].clone()).collect();
    let labels = chosen
        .iter()
        .map(|r| r.outcome.as_ref().and_then(|o| cfg.task.select(o)).expect("selected records are labelled"))
        .collect();
    Ok(LabelledSet { signals: preprocess_records(&chosen, &cfg.preprocess)?, labels, features: None })
}

/// Eval-mode logits for a list of signals.
pub fn classifier_scores(clf: &Classifier, signals: &[&Signal]) -> Result<Vec<f64>> {
    let feats = embed(&clf.params, &clf.encoder, signals, 16)?;
    scores_from_features(clf, &feats)
}

fn scores_from_features(clf: &Classifier, feats: &[Vec<f64>]) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let y = clf.forward_features(&mut g, feats)?;
    Ok(g.value(y).to_vec())
}

fn set_scores(clf: &Classifier, set: &LabelledSet) -> Result<Vec<f64>> {
    match &set.features {
        Some(f) => scores_from_features(clf, f),
        None => {
            let refs: Vec<&Signal> = set.signals.iter().collect();
            classifier_scores(clf, &refs)
        }
    }
}

fn mean_bce(scores: &[f64], labels: &[bool], pos_weight: f64) -> f64 {
    let s: f64 = scores
        .iter()
        .zip(labels)
        .map(|(&x, &y)| if y { pos_weight * math::softplus(-x) } else { math::softplus(x) })
        .sum();
    s / scores.len().max(1) as f64
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub classifier: Classifier,
    pub log: MetricsLog,
    pub best_epoch: usize,
    pub val_auc: f64,
    pub test_auc: f64,
    pub test_scores: Vec<f64>,
    pub test_labels: Vec<bool>,
    pub train_records: usize,
}

/// Trains a classifier on one outcome, from a pre-training checkpoint or
/// from scratch, with early stopping on validation AUC.
pub fn finetune(
    ckpt: Option<&Checkpoint>,
    train: &[EcgRecord],
    val: &[EcgRecord],
    test: &[EcgRecord],
    cfg: &FinetuneConfig,
    mut on_row: impl FnMut(&MetricsRow),
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    let mut clf = match ckpt {
        Some(c) => {
            if c.header.model.encoder != cfg.encoder {
                return Err(Error::Checkpoint(
                    "checkpoint encoder architecture differs from the configured one".into(),
                ));
            }
            Classifier::from_checkpoint(c, cfg.head.clone(), cfg.freeze_encoder, cfg.seed)?
        }
        None => Classifier::scratch(cfg.encoder.clone(), cfg.head.clone(), cfg.seed)?,
    };
    let mut sets = [
        labelled(train, cfg, cfg.max_train_records, Split::Train)?,
        labelled(val, cfg, None, Split::Val)?,
        labelled(test, cfg, None, Split::Test)?,
    ];
    for (set, split) in sets.iter().zip([Split::Train, Split::Val, Split::Test]) {
        if set.labels.iter().all(|&l| l) || set.labels.iter().all(|&l| !l) {
            return Err(Error::UndefinedMetric(format!(
                "{} split has a single `{}` class",
                split.name(),
                cfg.task.name()
            )));
        }
    }
    if clf.freeze_encoder {
        for set in sets.iter_mut() {
            let refs: Vec<&Signal> = set.signals.iter().collect();
            set.features = Some(embed(&clf.params, &clf.encoder, &refs, 16)?);
        }
    }
    let [train_set, val_set, test_set] = &sets;
    let n = train_set.labels.len();
    let n_pos = train_set.labels.iter().filter(|&&l| l).count();
    let pw = if cfg.pos_weight { (n - n_pos) as f64 / n_pos as f64 } else { 1.0 };
    let transferred = ckpt.is_some();
    let enc_scale = if transferred { cfg.encoder_lr_scale } else { 1.0 };

    let mut opt = AdamW::new(cfg.optimizer)?;
    let mut stop = EarlyStopState::new(cfg.patience, cfg.min_delta);
    let mut best = clf.params.clone();
    let mut best_val_auc = f64::NAN;
    let mut log = MetricsLog::new();

    for epoch in 0..cfg.max_epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng_from(&[cfg.seed, 0x6674, epoch as u64]));
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut g = Graph::new();
            let logits = match &train_set.features {
                Some(f) => {
                    let feats: Vec<Vec<f64>> = chunk.iter().map(|&i| f[i].clone()).collect();
                    clf.forward_features(&mut g, &feats)?
                }
                None => {
                    let refs: Vec<&Signal> = chunk.iter().map(|&i| &train_set.signals[i]).collect();
                    clf.forward(&mut g, &refs, Mode::Train)?
                }
            };
            let labels = chunk.iter().map(|&i| train_set.labels[i] as u8 as f64).collect();
            let loss = g.bce_with_logits(logits, labels, vec![true; chunk.len()], vec![pw])?;
            loss_sum += g.scalar(loss)? * chunk.len() as f64;
            clf.params.zero_grad();
            g.backward_into(loss, &mut clf.params)?;
            opt.step(&mut clf.params, |name| if name.starts_with("encoder.") { enc_scale } else { 1.0 })?;
            g.apply_bn_updates(&mut clf.params, clf.encoder.bn_momentum)?;
        }
        let row = MetricsRow { total: Some(loss_sum / n as f64), ..MetricsRow::empty(epoch, Split::Train) };
        on_row(&row);
        log.push(row);

        let vs = set_scores(&clf, val_set)?;
        let auc = roc_auc(&vs, &val_set.labels)?;
        let row = MetricsRow {
            total: Some(mean_bce(&vs, &val_set.labels, 1.0)),
            auc: Some(auc),
            ..MetricsRow::empty(epoch, Split::Val)
        };
        on_row(&row);
        log.push(row);

        let step = stop.update(epoch, -auc);
        if step.improved {
            best = clf.params.clone();
            best_val_auc = auc;
        }
        if step.stop {
            break;
        }
    }
    stop.restored_best = true;
    clf.params = best;
    let best_epoch = stop.best_epoch.unwrap_or(0);
    let test_scores = set_scores(&clf, test_set)?;
    let test_auc = roc_auc(&test_scores, &test_set.labels)?;
    let row = MetricsRow {
        total: Some(mean_bce(&test_scores, &test_set.labels, 1.0)),
        auc: Some(test_auc),
        ..MetricsRow::empty(best_epoch, Split::Test)
    };
    on_row(&row);
    log.push(row);
    Ok(FinetuneOutcome {
        classifier: clf,
        log,
        best_epoch,
        val_auc: best_val_auc,
        test_auc,
        test_scores,
        test_labels: test_set.labels.clone(),
        train_records: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic_corpus, split_records, OutcomeLabel, SplitFractions, SynthConfig};
    use proptest::prelude::*;
    use rand::Rng as _;

    fn brute_auc(scores: &[f64], labels: &[bool]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for (i, &li) in labels.iter().enumerate() {
            for (j, &lj) in labels.iter().enumerate() {
                if li && !lj {
                    den += 1.0;
                    if scores[i] > scores[j] {
                        num += 1.0;
                    } else if scores[i] == scores[j] {
                        num += 0.5;
                    }
                }
            }
        }
        num / den
    }

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap(), 0.75);
        assert_eq!(roc_auc(&[0.1, 0.2, 0.9, 0.95], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.3; 6], &[true, false, true, false, false, true]).unwrap(), 0.5);
        assert!(matches!(roc_auc(&[0.1, 0.2], &[true, true]), Err(Error::UndefinedMetric(_))));
        let curve = roc_curve(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap();
        assert_eq!(curve.first(), Some(&(0.0, 0.0)));
        assert_eq!(curve.last(), Some(&(1.0, 1.0)));
    }

    #[test]
    fn retrieval_and_cosine_examples() {
        let z = [1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0];
        assert_eq!(retrieval_accuracy(&z, 2).unwrap(), 1.0);
        assert_eq!(cosine_stats(&z, 2).unwrap(), (1.0, 0.0));
        let same = [0.3, 0.4, 0.3, 0.4, 0.3, 0.4, 0.3, 0.4];
        assert_eq!(retrieval_accuracy(&same, 2).unwrap(), 0.0);
        let (p, n) = cosine_stats(&same, 2).unwrap();
        assert!((p - 1.0).abs() < 1e-12 && (n - 1.0).abs() < 1e-12);
        assert!(matches!(retrieval_accuracy(&[1.0, 0.0, 0.0, 0.0], 2), Err(Error::DegenerateEmbedding { row: 1 })));
    }

    #[test]
    fn retrieval_chance_level() {
        let mut rng = rng_from(&[42]);
        let (n, d, draws) = (64, 128, 1000);
        let accs: Vec<f64> = (0..draws)
            .map(|_| {
                let z: Vec<f64> = (0..n * d).map(|_| crate::rng::normal(&mut rng)).collect();
                retrieval_accuracy(&z, d).unwrap()
            })
            .collect();
        let mean = math::mean(&accs);
        let se = math::std_dev(&accs) / (draws as f64).sqrt();
        assert!((mean - 1.0 / 63.0).abs() < 3.0 * se, "{mean} ± {se}");
        let z: Vec<f64> = (0..n * d).map(|_| crate::rng::normal(&mut rng)).collect();
        assert!(cosine_stats(&z, d).unwrap().1.abs() < 0.05);
    }

    #[test]
    fn early_stop_traces() {
        let mut s = EarlyStopState::new(2, 1e-4);
        let stops: Vec<bool> = [1.0, 0.9, 0.91, 0.92, 0.93].iter().enumerate().map(|(e, &v)| s.update(e, v).stop).collect();
        assert_eq!(stops, [false, false, false, false, true]);
        assert_eq!(s.best_epoch, Some(1));

        let mut s = EarlyStopState::new(2, 1e-4);
        assert!((0..50).all(|e| !s.update(e, 10.0 - e as f64 * 0.1).stop));

        let mut s = EarlyStopState::new(0, 1e-4);
        assert!(!s.update(0, 1.0).stop);
        assert!(s.update(1, 1.0).stop);
    }

    #[test]
    fn event_record_is_earliest_labelled() {
        let mut recs = generate_synthetic_corpus(&SynthConfig { n_patients: 3, ecgs_per_patient: [3, 3], ..Default::default() }).unwrap();
        recs.reverse();
        recs[0].outcome = None;
        let idx = select_event_records(&recs, OutcomeTask::Mortality);
        assert_eq!(idx.len(), 3);
        for &i in &idx {
            let r = &recs[i];
            assert!(recs
                .iter()
                .filter(|o| o.patient_id == r.patient_id && o.outcome.is_some())
                .all(|o| o.timestamp_days >= r.timestamp_days));
        }
    }

    fn tiny_pretrain() -> PretrainConfig {
        let mut model = ModelConfig::compact();
        model.encoder.stage_channels = vec![8, 8];
        model.encoder.stem_channels = 8;
        model.projector = crate::model::ProjectorConfig { hidden_dim: 16, out_dim: 8 };
        PretrainConfig { batch_pairs: 4, max_epochs: 1, val_batches: 1, model, ..Default::default() }
    }

    #[test]
    fn pretrain_logs_and_is_deterministic() {
        let recs = generate_synthetic_corpus(&SynthConfig { n_patients: 30, ..Default::default() }).unwrap();
        let [train, val, _] = split_records(recs, SplitFractions::default(), 1).unwrap();
        let cfg = tiny_pretrain();
        let a = pretrain(&train, &val, &cfg, |_| {}).unwrap();
        assert_eq!(a.log.len(), 2);
        assert_eq!((a.log[0].epoch, a.log[0].split), (0, Split::Train));
        assert_eq!((a.log[1].epoch, a.log[1].split), (0, Split::Val));
        let b = pretrain(&train, &val, &cfg, |_| {}).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.checkpoint, b.checkpoint);
        let total = a.log[0].total.unwrap();
        let want = 10.0 * a.log[0].l_ssl.unwrap() + 0.2 * a.log[0].l_sl.unwrap();
        assert!((total - want).abs() < 1e-12);
    }

    fn toy_outcome(recs: &mut [EcgRecord], f: impl Fn(&EcgRecord) -> bool) {
        for r in recs.iter_mut() {
            let y = f(r);
            r.outcome = Some(OutcomeLabel { mortality: Some(y), heart_failure: Some(!y) });
        }
    }

    #[test]
    fn separable_labels_reach_auc_one() {
        let mut recs = generate_synthetic_corpus(&SynthConfig { n_patients: 60, ecgs_per_patient: [1, 1], ..Default::default() }).unwrap();
        toy_outcome(&mut recs, |r| r.record_id.bytes().map(u32::from).sum::<u32>() % 2 == 0);
        let planted: Vec<EcgRecord> = recs
            .iter()
            .map(|r| {
                let pos = r.outcome.unwrap().mortality.unwrap();
                let mut sig = r.signal().to_vec();
                if pos {
                    for l in 0..crate::LEADS {
                        for t in 0..2500 {
                            sig[l * crate::SAMPLES + t] += 5.0 * libm::sinf(t as f32 * 0.2);
                        }
                    }
                }
                EcgRecord::new(r.record_id.clone(), r.patient_id.clone(), r.timestamp_days, sig, r.labels, r.outcome).unwrap()
            })
            .collect();
        let [train, val, test] = split_records(planted, SplitFractions { train: 0.6, val: 0.2, test: 0.2 }, 3).unwrap();
        let cfg = FinetuneConfig { encoder: tiny_pretrain().model.encoder, max_epochs: 40, patience: 40, ..Default::default() };
        let out = finetune(None, &train, &val, &test, &cfg, |_| {}).unwrap();
        assert_eq!(out.test_auc, 1.0);
    }

    #[test]
    fn shuffled_labels_give_chance_auc() {
        let mut recs = generate_synthetic_corpus(&SynthConfig { n_patients: 400, ecgs_per_patient: [1, 1], ..Default::default() }).unwrap();
        let mut rng = rng_from(&[5]);
        for r in recs.iter_mut() {
            let y = rng.random::<bool>();
            r.outcome = Some(OutcomeLabel { mortality: Some(y), heart_failure: None });
        }
        let enc = tiny_pretrain().model.encoder;
        let params = {
            let mut cfg = tiny_pretrain().model;
            cfg.encoder = enc.clone();
            init_pretrain_params(&cfg, 1).unwrap()
        };
        let ckpt = Checkpoint::new(CheckpointKind::Pretrain, tiny_pretrain().model, TargetNorm::default(), params);
        let aucs: Vec<f64> = (0..5)
            .map(|seed| {
                let [train, val, test] = split_records(recs.clone(), SplitFractions { train: 0.5, val: 0.25, test: 0.25 }, seed).unwrap();
                let cfg = FinetuneConfig { encoder: enc.clone(), seed, max_epochs: 20, ..Default::default() };
                finetune(Some(&ckpt), &train, &val, &test, &cfg, |_| {}).unwrap().test_auc
            })
            .collect();
        let mean = math::mean(&aucs);
        assert!((0.45..=0.55).contains(&mean), "{aucs:?}");
    }

    #[test]
    fn frozen_finetune_keeps_encoder_bytes() {
        let recs = generate_synthetic_corpus(&SynthConfig { n_patients: 40, ..Default::default() }).unwrap();
        let [train, val, test] = split_records(recs, SplitFractions { train: 0.5, val: 0.25, test: 0.25 }, 2).unwrap();
        let cfg = tiny_pretrain();
        let ckpt = Checkpoint::new(CheckpointKind::Pretrain, cfg.model.clone(), TargetNorm::default(), init_pretrain_params(&cfg.model, 3).unwrap());
        let fc = FinetuneConfig { encoder: cfg.model.encoder.clone(), max_epochs: 10, patience: 100, ..Default::default() };
        match finetune(Some(&ckpt), &train, &val, &test, &fc, |_| {}) {
            Ok(out) => {
                for (name, p) in ckpt.params.iter().filter(|(n, _)| n.starts_with("encoder.")) {
                    assert_eq!(out.classifier.params.tensor(name).unwrap().data(), p.tensor.data(), "{name}");
                }
            }
            Err(Error::UndefinedMetric(_)) => {}
            Err(e) => panic!("{e}"),
        }
        let mut other = fc.clone();
        other.encoder.stem_channels += 1;
        assert!(matches!(finetune(Some(&ckpt), &train, &val, &test, &other, |_| {}), Err(Error::Checkpoint(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn auc_matches_pair_counting(
            raw in prop::collection::vec((0u8..12, any::<bool>()), 2..200),
        ) {
            let scores: Vec<f64> = raw.iter().map(|&(s, _)| s as f64 / 4.0).collect();
            let labels: Vec<bool> = raw.iter().map(|&(_, l)| l).collect();
            match roc_auc(&scores, &labels) {
                Ok(a) => {
                    prop_assert_eq!(a, brute_auc(&scores, &labels));
                    let warped: Vec<f64> = scores.iter().map(|s| (s * 3.0).exp() - 7.0).collect();
                    prop_assert_eq!(roc_auc(&warped, &labels).unwrap(), a);
                }
                Err(e) => prop_assert!(matches!(e, Error::UndefinedMetric(_))),
            }
        }

        #[test]
        fn retrieval_and_cosine_match_brute_force(
            half in 1usize..8, dim in 2usize..5, seed in any::<u64>(),
        ) {
            let mut rng = rng_from(&[seed]);
            let n = 2 * half;
            let z: Vec<f64> = (0..n * dim).map(|_| rng.random_range(-1.0..1.0) + 1e-3).collect();
            let rows: Vec<&[f64]> = z.chunks(dim).collect();
            let c = |a: &[f64], b: &[f64]| {
                let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
                let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
                a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
            };
            let mut hits = 0;
            let (mut pos, mut neg, mut nn) = (0.0, 0.0, 0);
            for k in 0..n {
                let p = c(rows[k], rows[k ^ 1]);
                if (0..n).filter(|&l| l != k && l != k ^ 1).all(|l| p > c(rows[k], rows[l])) {
                    hits += 1;
                }
                if k % 2 == 0 { pos += p; }
                for l in k + 1..n {
                    if l != k ^ 1 { neg += c(rows[k], rows[l]); nn += 1; }
                }
            }
            prop_assert_eq!(retrieval_accuracy(&z, dim).unwrap(), hits as f64 / n as f64);
            let (p, q) = cosine_stats(&z, dim).unwrap();
            prop_assert!((p - pos / half as f64).abs() < 1e-12);
            let want = if nn == 0 { 0.0 } else { neg / nn as f64 };
            prop_assert!((q - want).abs() < 1e-12);
        }
    }
}
