//! Subcommands. Reports go to stdout, progress and errors to stderr.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use ecgssl_core::corpus::{generate_synthetic_corpus, split_records, EcgRecord, OutcomeTask};
use ecgssl_core::model::{Checkpoint, CheckpointKind, Classifier, CHECKPOINT_VERSION};
use ecgssl_core::pairing::build_pair_index;
use ecgssl_core::train::{
    batch_embeddings, classifier_scores, cosine_stats, cosine_values, finetune, fixed_batches, preprocess_records,
    pretrain, retrieval_accuracy, roc_auc, roc_curve, select_event_records, MetricsRow,
};
use serde::Serialize;
use serde_json::{json, Value};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::ExperimentConfig;
use crate::manifest::{load_manifest, manifest_path, read_record, write_synthetic_corpus, ManifestEntry};
use crate::metrics::write_metrics;
use crate::plot::{cosine_svg, roc_svg};
use crate::{Error, Result};

pub const PRETRAIN_CHECKPOINT: &str = "pretrain.ckpt";
pub const PRETRAIN_METRICS: &str = "pretrain_metrics.csv";
pub const CLASSIFIER_CHECKPOINT: &str = "classifier.ckpt";
pub const FINETUNE_METRICS: &str = "finetune_metrics.csv";
pub const EVAL_REPORT: &str = "eval_report.json";

#[derive(Debug, Parser)]
#[command(name = "ecgssl", version, about = "Patient-temporal contrastive pre-training for 12-lead ECGs")]
pub struct Cli {
    /// TOML experiment config; flags override its keys.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Run seed (for `synth`, the generator seed).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_name = "PATH")]
    pub output_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Mortality,
    #[value(name = "heart_failure")]
    HeartFailure,
}

impl From<TaskArg> for OutcomeTask {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Mortality => OutcomeTask::Mortality,
            TaskArg::HeartFailure => OutcomeTask::HeartFailure,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InspectWhat {
    Pairs,
    Records,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus (manifest plus blobs) on disk.
    Synth {
        /// Target directory; defaults to `<output-dir>/corpus`.
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
    /// Contrastive plus supervised pre-training; writes the best checkpoint.
    Pretrain {
        #[arg(long, value_name = "PATH")]
        corpus: Option<PathBuf>,
        #[arg(long)]
        max_epochs: Option<usize>,
    },
    /// Train an outcome classifier from a checkpoint or from scratch.
    Finetune {
        #[arg(long, value_name = "PATH", required_unless_present = "scratch", conflicts_with = "scratch")]
        from_checkpoint: Option<PathBuf>,
        #[arg(long)]
        scratch: bool,
        #[arg(long, value_enum)]
        task: Option<TaskArg>,
        /// Train the transferred encoder too, at a reduced learning rate.
        #[arg(long)]
        unfreeze: bool,
        #[arg(long)]
        max_epochs: Option<usize>,
        #[arg(long)]
        max_train_records: Option<usize>,
        #[arg(long, value_name = "PATH")]
        corpus: Option<PathBuf>,
    },
    /// Score a checkpoint on one split of a corpus.
    Eval {
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "PATH")]
        corpus: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long, value_enum)]
        task: Option<TaskArg>,
        /// Also write ROC and cosine-histogram SVGs.
        #[arg(long)]
        report: bool,
    },
    /// Print corpus statistics.
    Inspect {
        #[arg(value_enum)]
        what: InspectWhat,
        #[arg(long, value_name = "PATH")]
        corpus: Option<PathBuf>,
    },
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let text = e.render().to_string();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    0
                }
                _ => {
                    let _ = write!(err, "{text}");
                    1
                }
            };
        }
    };
    match execute(&cli, out, err) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn resolve_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(d) = &cli.output_dir {
        cfg.output_dir = d.clone();
    }
    Ok(cfg)
}

fn prepare_output(cfg: &ExperimentConfig, command: &str) -> Result<PathBuf> {
    cfg.validate()?;
    let dir = cfg.output_dir.clone();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let path = dir.join(format!("{command}.config.toml"));
    fs::write(&path, cfg.to_toml()?).map_err(|e| Error::io(&path, e))?;
    let run = json!({
        "command": command,
        "seed": cfg.seed,
        "ecgssl_version": env!("CARGO_PKG_VERSION"),
        "checkpoint_version": CHECKPOINT_VERSION,
        "corpus": cfg.corpus.path.as_ref().map_or("synthetic".to_string(), |p| p.display().to_string()),
    });
    write_json(&dir.join(format!("{command}.run.json")), &run)?;
    Ok(dir)
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(v).expect("report serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn print_json(out: &mut dyn Write, v: &Value) -> Result<()> {
    writeln!(out, "{}", serde_json::to_string_pretty(v).expect("report serializes"))
        .map_err(|e| Error::io("<stdout>", e))
}

fn load_records(cfg: &ExperimentConfig) -> Result<Vec<EcgRecord>> {
    match &cfg.corpus.path {
        Some(p) => load_manifest(&manifest_path(p))?.iter().map(read_record).collect(),
        None => Ok(generate_synthetic_corpus(&cfg.corpus.synth)?),
    }
}

fn load_entries(cfg: &ExperimentConfig) -> Result<Vec<ManifestEntry>> {
    match &cfg.corpus.path {
        Some(p) => Ok(load_manifest(&manifest_path(p))?.into_iter().map(|d| d.entry).collect()),
        None => Ok(generate_synthetic_corpus(&cfg.corpus.synth)?
            .iter()
            .map(|r| ManifestEntry::from_record(r, String::new()))
            .collect()),
    }
}

fn progress(err: &mut dyn Write) -> impl FnMut(&MetricsRow) + '_ {
    move |r: &MetricsRow| {
        let f = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
        let _ = writeln!(
            err,
            "epoch {:>3} {:<5} total {} l_ssl {} l_sl {} retrieval {} pos_cos {} neg_cos {} auc {}",
            r.epoch,
            r.split.name(),
            f(r.total),
            f(r.l_ssl),
            f(r.l_sl),
            f(r.retrieval_acc),
            f(r.mean_pos_cos),
            f(r.mean_neg_cos),
            f(r.auc)
        );
    }
}

fn execute(cli: &Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let mut cfg = resolve_config(cli)?;
    match &cli.command {
        Command::Synth { out: target } => {
            if let Some(s) = cli.seed {
                cfg.corpus.synth.seed = s;
            }
            let dir = prepare_output(&cfg, "synth")?;
            let target = target.clone().unwrap_or_else(|| dir.join("corpus"));
            let entries = write_synthetic_corpus(&cfg.corpus.synth, &target)?;
            let mut summary = corpus_summary(&entries, &cfg);
            summary.insert("corpus".into(), json!(target.display().to_string()));
            print_json(out, &Value::Object(summary.into_iter().collect()))
        }
        Command::Pretrain { corpus, max_epochs } => {
            if let Some(p) = corpus {
                cfg.corpus.path = Some(p.clone());
            }
            if let Some(m) = max_epochs {
                cfg.pretrain.max_epochs = *m;
            }
            let dir = prepare_output(&cfg, "pretrain")?;
            let [train, val, _] = split_records(load_records(&cfg)?, cfg.corpus.split, cfg.seed)?;
            let outcome = pretrain(&train, &val, &cfg.pretrain_config(), progress(err))?;
            let ckpt_path = dir.join(PRETRAIN_CHECKPOINT);
            save_checkpoint(&outcome.checkpoint, &ckpt_path)?;
            write_metrics(&dir.join(PRETRAIN_METRICS), &outcome.log)?;
            let best_val = outcome.log.iter().find(|r| r.epoch == outcome.best_epoch && r.split.name() == "val");
            let report = json!({
                "best_epoch": outcome.best_epoch,
                "epochs_run": outcome.log.iter().map(|r| r.epoch + 1).max().unwrap_or(0),
                "stopped_early": outcome.stopped_early,
                "best_val_total": best_val.and_then(|r| r.total),
                "best_val_retrieval_acc": best_val.and_then(|r| r.retrieval_acc),
                "checkpoint": ckpt_path.display().to_string(),
                "metrics": dir.join(PRETRAIN_METRICS).display().to_string(),
            });
            write_json(&dir.join("pretrain_summary.json"), &report)?;
            print_json(out, &report)
        }
        Command::Finetune { from_checkpoint, scratch: _, task, unfreeze, max_epochs, max_train_records, corpus } => {
            if let Some(p) = corpus {
                cfg.corpus.path = Some(p.clone());
            }
            if let Some(t) = task {
                cfg.finetune.task = (*t).into();
            }
            if *unfreeze {
                cfg.finetune.freeze_encoder = false;
            }
            if let Some(m) = max_epochs {
                cfg.finetune.max_epochs = *m;
            }
            if let Some(m) = max_train_records {
                cfg.finetune.max_train_records = Some(*m);
            }
            let ckpt = match from_checkpoint {
                Some(p) if !p.is_file() => {
                    return Err(Error::Usage(format!("--from-checkpoint: no such file {}", p.display())))
                }
                Some(p) => Some(load_checkpoint(p)?),
                None => None,
            };
            let dir = prepare_output(&cfg, "finetune")?;
            let [train, val, test] = split_records(load_records(&cfg)?, cfg.corpus.split, cfg.seed)?;
            let fcfg = cfg.finetune_config();
            let outcome = finetune(ckpt.as_ref(), &train, &val, &test, &fcfg, progress(err))?;
            let source = if ckpt.is_some() { "pretrained" } else { "scratch" };
            let mut saved = outcome.classifier.to_checkpoint(ckpt.as_ref().map(|c| c.header.target_norm).unwrap_or_default());
            let meta = &mut saved.header.meta;
            meta.insert("task".into(), fcfg.task.name().into());
            meta.insert("source".into(), source.into());
            meta.insert("seed".into(), cfg.seed.to_string());
            meta.insert("best_epoch".into(), outcome.best_epoch.to_string());
            meta.insert("val_auc".into(), outcome.val_auc.to_string());
            meta.insert("test_auc".into(), outcome.test_auc.to_string());
            save_checkpoint(&saved, &dir.join(CLASSIFIER_CHECKPOINT))?;
            write_metrics(&dir.join(FINETUNE_METRICS), &outcome.log)?;
            let report = json!({
                "task": fcfg.task.name(),
                "source": source,
                "freeze_encoder": ckpt.is_some() && fcfg.freeze_encoder,
                "train_records": outcome.train_records,
                "best_epoch": outcome.best_epoch,
                "val_auc": outcome.val_auc,
                "test_auc": outcome.test_auc,
                "checkpoint": dir.join(CLASSIFIER_CHECKPOINT).display().to_string(),
                "metrics": dir.join(FINETUNE_METRICS).display().to_string(),
            });
            write_json(&dir.join("finetune_summary.json"), &report)?;
            print_json(out, &report)
        }
        Command::Eval { checkpoint, corpus, split, task, report } => {
            if let Some(p) = corpus {
                cfg.corpus.path = Some(p.clone());
            }
            if !checkpoint.is_file() {
                return Err(Error::Usage(format!("--checkpoint: no such file {}", checkpoint.display())));
            }
            let ckpt = load_checkpoint(checkpoint)?;
            cfg.validate()?;
            let dir = cfg.output_dir.clone();
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let records = select_split(load_records(&cfg)?, &cfg, *split)?;
            let (result, plots) = evaluate(&ckpt, &records, &cfg, task.map(Into::into), *split)?;
            write_json(&dir.join(EVAL_REPORT), &result)?;
            if *report {
                for (name, svg) in plots {
                    let p = dir.join(name);
                    fs::write(&p, svg).map_err(|e| Error::io(&p, e))?;
                }
            }
            print_json(out, &result)
        }
        Command::Inspect { what, corpus } => {
            if let Some(p) = corpus {
                cfg.corpus.path = Some(p.clone());
            }
            cfg.validate()?;
            let entries = load_entries(&cfg)?;
            let stats = match what {
                InspectWhat::Pairs => corpus_summary(&entries, &cfg),
                InspectWhat::Records => record_stats(&entries),
            };
            for (k, v) in stats {
                writeln!(out, "{k}: {v}").map_err(|e| Error::io("<stdout>", e))?;
            }
            Ok(())
        }
    }
}

fn select_split(records: Vec<EcgRecord>, cfg: &ExperimentConfig, split: SplitArg) -> Result<Vec<EcgRecord>> {
    let [train, val, test] = match split {
        SplitArg::All => return Ok(records),
        _ => split_records(records, cfg.corpus.split, cfg.seed)?,
    };
    Ok(match split {
        SplitArg::Train => train,
        SplitArg::Val => val,
        _ => test,
    })
}

fn split_name(s: SplitArg) -> &'static str {
    match s {
        SplitArg::Train => "train",
        SplitArg::Val => "val",
        SplitArg::Test => "test",
        SplitArg::All => "all",
    }
}

type Plots = Vec<(&'static str, String)>;

fn evaluate(
    ckpt: &Checkpoint,
    records: &[EcgRecord],
    cfg: &ExperimentConfig,
    task: Option<OutcomeTask>,
    split: SplitArg,
) -> Result<(Value, Plots)> {
    let mut plots = Plots::new();
    let model = &ckpt.header.model;
    let kind = ckpt.header.kind;
    let mut report = serde_json::Map::new();
    report.insert("checkpoint_kind".into(), json!(match kind {
        CheckpointKind::Pretrain => "pretrain",
        CheckpointKind::Classifier => "classifier",
    }));
    report.insert("split".into(), json!(split_name(split)));
    report.insert("records".into(), json!(records.len()));

    if kind == CheckpointKind::Classifier {
        let task = task
            .or_else(|| match ckpt.header.meta.get("task").map(String::as_str) {
                Some("mortality") => Some(OutcomeTask::Mortality),
                Some("heart_failure") => Some(OutcomeTask::HeartFailure),
                _ => None,
            })
            .unwrap_or(cfg.finetune.task);
        let clf = Classifier::from_classifier_checkpoint(ckpt)?;
        let idx = select_event_records(records, task);
        let chosen: Vec<EcgRecord> = idx.iter().map(|&i| records[i].clone()).collect();
        let labels: Vec<bool> = chosen.iter().map(|r| r.outcome.and_then(|o| task.select(&o)).unwrap_or(false)).collect();
        let signals = preprocess_records(&chosen, &cfg.preprocess)?;
        let refs: Vec<_> = signals.iter().collect();
        let scores = classifier_scores(&clf, &refs)?;
        let auc = roc_auc(&scores, &labels)?;
        let n_pos = labels.iter().filter(|&&l| l).count();
        report.insert("task".into(), json!(task.name()));
        report.insert("auc".into(), json!(auc));
        report.insert("n_pos".into(), json!(n_pos));
        report.insert("n_neg".into(), json!(labels.len() - n_pos));
        plots.push(("roc.svg", roc_svg(&roc_curve(&scores, &labels)?, auc)));
    } else {
        report.insert("auc".into(), Value::Null);
    }

    let projection = kind == CheckpointKind::Pretrain;
    let dim = if projection { model.projector.out_dim } else { model.encoder.embedding_dim() };
    let index = build_pair_index(records, &cfg.pairing);
    report.insert("embedding".into(), json!(if projection { "projection" } else { "encoder" }));
    match fixed_batches(&index, cfg.pretrain.batch_pairs, cfg.pretrain.val_batches, cfg.seed) {
        Ok(batches) => {
            let signals = preprocess_records(records, &cfg.preprocess)?;
            let zs = batch_embeddings(&ckpt.params, model, &signals, &batches, &cfg.augment, projection)?;
            let (mut acc, mut pos_m, mut neg_m) = (0.0, 0.0, 0.0);
            let (mut pos, mut neg) = (Vec::new(), Vec::new());
            for z in &zs {
                acc += retrieval_accuracy(z, dim)?;
                let (p, n) = cosine_stats(z, dim)?;
                pos_m += p;
                neg_m += n;
                let (pv, nv) = cosine_values(z, dim)?;
                pos.extend(pv);
                neg.extend(nv);
            }
            let n = zs.len() as f64;
            report.insert("retrieval_acc".into(), json!(acc / n));
            report.insert("mean_pos_cos".into(), json!(pos_m / n));
            report.insert("mean_neg_cos".into(), json!(neg_m / n));
            plots.push(("cosine_hist.svg", cosine_svg(&pos, &neg, 40)));
        }
        Err(ecgssl_core::Error::Batch(_)) => {
            for k in ["retrieval_acc", "mean_pos_cos", "mean_neg_cos"] {
                report.insert(k.into(), Value::Null);
            }
        }
        Err(e) => return Err(e.into()),
    }
    Ok((Value::Object(report), plots))
}

/// Patient, record and positive-pair counts.
pub fn corpus_summary(entries: &[ManifestEntry], cfg: &ExperimentConfig) -> BTreeMap<String, Value> {
    let keys: Vec<(&str, f64)> = entries.iter().map(|e| (e.patient_id.as_str(), e.timestamp_days)).collect();
    let index = build_pair_index(&keys, &cfg.pairing);
    let patients: std::collections::BTreeSet<&str> = entries.iter().map(|e| e.patient_id.as_str()).collect();
    let mut m = BTreeMap::new();
    m.insert("patients".into(), json!(patients.len()));
    m.insert("records".into(), json!(entries.len()));
    m.insert("window_days".into(), json!(cfg.pairing.window_days));
    m.insert("pairs".into(), json!(index.pairs().len()));
    m.insert("patients_with_pairs".into(), json!(index.patient_pairs().len()));
    m.insert("singleton_patients".into(), json!(index.singletons().len()));
    m.insert("eligible_patients".into(), json!(index.eligible_patients()));
    m.insert("batches_per_epoch".into(), json!(index.batches_per_epoch(cfg.pretrain.batch_pairs)));
    m
}

fn record_stats(entries: &[ManifestEntry]) -> BTreeMap<String, Value> {
    let mut per_patient: BTreeMap<&str, usize> = BTreeMap::new();
    for e in entries {
        *per_patient.entry(&e.patient_id).or_default() += 1;
    }
    let count = |f: &dyn Fn(&ManifestEntry) -> Option<bool>, v: bool| entries.iter().filter(|e| f(e) == Some(v)).count();
    let present = |f: &dyn Fn(&ManifestEntry) -> Option<f64>| entries.iter().filter(|e| f(e).is_some()).count();
    let t = entries.iter().map(|e| e.timestamp_days);
    let mut m = BTreeMap::new();
    m.insert("records".into(), json!(entries.len()));
    m.insert("patients".into(), json!(per_patient.len()));
    m.insert("records_per_patient_min".into(), json!(per_patient.values().min().copied().unwrap_or(0)));
    m.insert("records_per_patient_max".into(), json!(per_patient.values().max().copied().unwrap_or(0)));
    m.insert("timestamp_min".into(), json!(t.clone().reduce(f64::min)));
    m.insert("timestamp_max".into(), json!(t.reduce(f64::max)));
    m.insert("af_true".into(), json!(count(&|e| e.af, true)));
    m.insert("ste_true".into(), json!(count(&|e| e.ste, true)));
    m.insert("p_ms_present".into(), json!(present(&|e| e.p_ms)));
    m.insert("qrs_ms_present".into(), json!(present(&|e| e.qrs_ms)));
    m.insert("t_ms_present".into(), json!(present(&|e| e.t_ms)));
    m.insert("rr_ms_present".into(), json!(present(&|e| e.rr_ms)));
    m.insert("mortality_true".into(), json!(count(&|e| e.mortality, true)));
    m.insert("mortality_false".into(), json!(count(&|e| e.mortality, false)));
    m.insert("heart_failure_true".into(), json!(count(&|e| e.heart_failure, true)));
    m.insert("heart_failure_false".into(), json!(count(&|e| e.heart_failure, false)));
    m
}
