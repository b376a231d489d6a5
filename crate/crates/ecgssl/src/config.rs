//! TOML experiment configuration. Every key has a default, unknown keys are
//! rejected, and the resolved document is echoed next to run outputs.

use std::path::{Path, PathBuf};

use ecgssl_core::autodiff::AdamWConfig;
use ecgssl_core::corpus::{OutcomeTask, SplitFractions, SynthConfig};
use ecgssl_core::model::ModelConfig;
use ecgssl_core::objectives::ObjectivesConfig;
use ecgssl_core::pairing::PairingConfig;
use ecgssl_core::signal::{AugmentConfig, PreprocessConfig};
use ecgssl_core::train::{FinetuneConfig, PretrainConfig};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct CorpusConfig {
    /// Manifest file or corpus directory; when absent the corpus is
    /// generated in memory from `synth`.
    pub path: Option<PathBuf>,
    pub synth: SynthConfig,
    pub split: SplitFractions,
}


#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub batch_pairs: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub val_batches: usize,
    pub optimizer: AdamWConfig,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let d = PretrainConfig::default();
        Self {
            batch_pairs: d.batch_pairs,
            max_epochs: d.max_epochs,
            patience: d.patience,
            min_delta: d.min_delta,
            val_batches: d.val_batches,
            optimizer: d.optimizer,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSection {
    pub task: OutcomeTask,
    pub pos_weight: bool,
    pub freeze_encoder: bool,
    pub encoder_lr_scale: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub max_train_records: Option<usize>,
    pub optimizer: AdamWConfig,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        let d = FinetuneConfig::default();
        Self {
            task: d.task,
            pos_weight: d.pos_weight,
            freeze_encoder: d.freeze_encoder,
            encoder_lr_scale: d.encoder_lr_scale,
            max_epochs: d.max_epochs,
            batch_size: d.batch_size,
            patience: d.patience,
            min_delta: d.min_delta,
            max_train_records: d.max_train_records,
            optimizer: d.optimizer,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Drives the patient split and all training randomness.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub corpus: CorpusConfig,
    pub preprocess: PreprocessConfig,
    pub augment: AugmentConfig,
    pub pairing: PairingConfig,
    pub model: ModelConfig,
    pub objectives: ObjectivesConfig,
    pub pretrain: PretrainSection,
    pub finetune: FinetuneSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs"),
            corpus: CorpusConfig::default(),
            preprocess: PreprocessConfig::default(),
            augment: AugmentConfig::default(),
            pairing: PairingConfig::default(),
            model: ModelConfig::default(),
            objectives: ObjectivesConfig::default(),
            pretrain: PretrainSection::default(),
            finetune: FinetuneSection::default(),
        }
    }
}

fn section(name: &str, r: ecgssl_core::Result<()>) -> Result<()> {
    r.map_err(|e| Error::Config(format!("[{name}] {e}")))
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
                Self::from_toml(&text).map_err(|e| match e {
                    Error::Config(m) => Error::Config(format!("{}: {m}", p.display())),
                    other => other,
                })
            }
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        section("corpus.synth", self.corpus.synth.validate())?;
        section("corpus.split", self.corpus.split.validate())?;
        section("preprocess", self.preprocess.validate())?;
        section("augment", self.augment.validate(ecgssl_core::SAMPLES))?;
        section("pairing", self.pairing.validate())?;
        section("model", self.model.validate())?;
        section("objectives", self.objectives.validate())?;
        section("pretrain", self.pretrain_config().validate())?;
        section("finetune", self.finetune_config().validate())
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        let p = &self.pretrain;
        PretrainConfig {
            batch_pairs: p.batch_pairs,
            max_epochs: p.max_epochs,
            seed: self.seed,
            patience: p.patience,
            min_delta: p.min_delta,
            val_batches: p.val_batches,
            optimizer: p.optimizer,
            model: self.model.clone(),
            preprocess: self.preprocess,
            augment: self.augment,
            pairing: self.pairing,
            objectives: self.objectives.clone(),
        }
    }

    pub fn finetune_config(&self) -> FinetuneConfig {
        let f = &self.finetune;
        FinetuneConfig {
            task: f.task,
            pos_weight: f.pos_weight,
            freeze_encoder: f.freeze_encoder,
            encoder_lr_scale: f.encoder_lr_scale,
            max_epochs: f.max_epochs,
            batch_size: f.batch_size,
            seed: self.seed,
            patience: f.patience,
            min_delta: f.min_delta,
            max_train_records: f.max_train_records,
            optimizer: f.optimizer,
            head: self.model.classifier.clone(),
            encoder: self.model.encoder.clone(),
            preprocess: self.preprocess,
        }
    }
}
