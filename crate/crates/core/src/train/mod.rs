//! Pre-training and fine-tuning loops, dataset construction and checkpoints.

pub mod checkpoint;
mod dataset;
mod finetune;
pub mod optim;
mod pretrain;

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint, Checkpoint, CheckpointError, Resume};
pub use dataset::{
    build_finetune_dataset, read_examples_tsv, read_split, write_examples_tsv, ClassSource, DatasetConfig,
    DatasetMode, LabeledExample, SplitDataset,
};
pub use finetune::{evaluate, finetune, predict, EpochMetrics, FinetuneOutcome, Prediction};
pub use optim::{AdamW, AdamWConfig, LinearSchedule};
pub use pretrain::{pretrain, Pretrainer, StepLoss};

use crate::corpus::CorpusError;
use crate::metrics::MetricsError;
use crate::model::{ModelError, Objectives};
use crate::token::TokenError;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("pre-training corpus is empty")]
    EmptyCorpus,
    #[error("class {0:?} has no examples")]
    ClassEmpty(String),
    #[error("model is incompatible with the data: {0}")]
    IncompatibleModel(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("training diverged at step {0} (non-finite parameters)")]
    Diverged(u64),
    #[error("{path}:{line}: {reason}")]
    MalformedDataset { path: String, line: usize, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Token(#[from] TokenError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Pretrain,
    FinetunePacket,
    FinetuneFlow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub batch_size: usize,
    /// Optimizer steps (pre-training).
    pub steps: u64,
    /// Passes over the training split (fine-tuning).
    pub epochs: usize,
    pub learning_rate: f64,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Sequence length including `[CLS]`/`[SEP]` and padding.
    pub max_len: usize,
    /// Dropout on the pooled features feeding the classifier.
    pub head_dropout: f64,
    pub objectives: Objectives,
    /// Classify flows by concatenating per-packet pooled vectors instead of
    /// one stitched sequence.
    #[serde(default)]
    pub concat_flow: bool,
}

impl TrainConfig {
    pub fn paper_pretrain() -> Self {
        TrainConfig {
            mode: TrainMode::Pretrain,
            batch_size: 32,
            steps: 500_000,
            epochs: 0,
            learning_rate: 2e-5,
            warmup_ratio: 0.1,
            weight_decay: 0.01,
            seed: 0,
            max_len: 512,
            head_dropout: 0.0,
            objectives: Objectives::default(),
            concat_flow: false,
        }
    }

    pub fn paper_finetune(mode: TrainMode) -> Self {
        let flow = mode == TrainMode::FinetuneFlow;
        TrainConfig {
            mode,
            epochs: 10,
            steps: 0,
            learning_rate: if flow { 6e-5 } else { 2e-5 },
            max_len: if flow { 512 } else { 128 },
            head_dropout: 0.5,
            ..Self::paper_pretrain()
        }
    }

    /// Desk-scale pre-training; the small model tolerates and needs a far
    /// larger step size than the full-size one.
    pub fn desk_pretrain() -> Self {
        TrainConfig {
            steps: 500,
            learning_rate: 1e-3,
            max_len: 128,
            ..Self::paper_pretrain()
        }
    }

    pub fn desk_finetune(mode: TrainMode) -> Self {
        TrainConfig {
            learning_rate: 5e-4,
            max_len: 128,
            ..Self::paper_finetune(mode)
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return bad("warmup_ratio must lie in [0, 1]");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.head_dropout) {
            return bad("head_dropout must lie in [0, 1)");
        }
        if self.mode == TrainMode::Pretrain && !self.objectives.mbm && !self.objectives.sbp {
            return bad("at least one pre-training objective is required");
        }
        Ok(())
    }
}

/// Resumable progress of a training run, stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub config: TrainConfig,
    pub step: u64,
    pub optimizer_steps: u64,
    pub history: Vec<StepLoss>,
}
