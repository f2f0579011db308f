use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::{LabeledExample, SplitDataset};
use super::optim::{AdamW, LinearSchedule};
use super::{TrainConfig, TrainError, TrainMode};
use crate::metrics::{confusion, macro_report, MacroReport};
use crate::model::{Encoder, HeadConfig};
use crate::seed;
use crate::token::{build_single_sequence, TokenSequence};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation: Option<MacroReport>,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    /// Parameters from the best validation epoch.
    pub model: Encoder<f32>,
    pub epochs: Vec<EpochMetrics>,
    /// 1-based.
    pub best_epoch: usize,
    pub step_losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub class: usize,
    pub probabilities: Vec<f64>,
}

/// Model inputs for one example: one sequence, or one per packet when the
/// head concatenates several pooled vectors.
fn inputs(ex: &LabeledExample, max_len: usize, segments: usize) -> Result<Vec<TokenSequence>, TrainError> {
    if segments > 1 {
        Ok(ex
            .units()
            .into_iter()
            .take(segments)
            .map(|u| build_single_sequence(u, max_len))
            .collect::<Result<_, _>>()?)
    } else {
        Ok(vec![build_single_sequence(&ex.tokens, max_len)?])
    }
}

fn check_compatible(model: &Encoder<f32>, examples: &[&LabeledExample], max_len: usize) -> Result<(), TrainError> {
    let c = model.config();
    if max_len > c.max_positions {
        return Err(TrainError::IncompatibleModel(format!(
            "max_len {max_len} exceeds the model's {} positions",
            c.max_positions
        )));
    }
    for ex in examples {
        if let Some(t) = ex.tokens.iter().find(|t| t.index() >= c.vocab_size) {
            return Err(TrainError::IncompatibleModel(format!(
                "token {} outside the model vocabulary of {}",
                t.0, c.vocab_size
            )));
        }
    }
    Ok(())
}

/// Adds a fresh classification head and trains every encoder parameter;
/// returns the parameters of the epoch with the best validation macro-F1
/// (earliest epoch on ties).
pub fn finetune(
    dataset: &SplitDataset,
    pretrained: Encoder<f32>,
    cfg: &TrainConfig,
) -> Result<FinetuneOutcome, TrainError> {
    cfg.validate()?;
    if cfg.mode == TrainMode::Pretrain {
        return Err(TrainError::InvalidConfig("fine-tuning needs a fine-tune mode".into()));
    }
    if pretrained.head().is_some() {
        return Err(TrainError::IncompatibleModel("model already has a classification head".into()));
    }
    if dataset.train.is_empty() {
        return Err(TrainError::InvalidConfig("training split is empty".into()));
    }
    let k = dataset.classes.len();
    if k < 2 {
        log::warn!("fine-tuning with {k} class; metrics are degenerate");
    }
    let all: Vec<&LabeledExample> = dataset
        .train
        .iter()
        .chain(&dataset.validation)
        .chain(&dataset.test)
        .collect();
    check_compatible(&pretrained, &all, cfg.max_len)?;
    let segments = if cfg.concat_flow && cfg.mode == TrainMode::FinetuneFlow {
        dataset.train.iter().map(|e| e.units().len()).max().unwrap_or(1).max(1)
    } else {
        1
    };
    let mut model = pretrained.with_classifier_seeded(
        HeadConfig {
            num_classes: k.max(1),
            segments,
        },
        cfg.seed,
    )?;

    let train_inputs: Vec<(Vec<TokenSequence>, usize)> = dataset
        .train
        .iter()
        .map(|e| Ok((inputs(e, cfg.max_len, segments)?, e.class_id)))
        .collect::<Result<_, TrainError>>()?;
    let mut optimizer = AdamW::new(model.params(), cfg.adamw());
    optimizer.freeze(model.params(), Encoder::<f32>::is_pretraining_head);
    let per_epoch = train_inputs.len().div_ceil(cfg.batch_size) as u64;
    let schedule = LinearSchedule::new(cfg.learning_rate, per_epoch * cfg.epochs as u64, cfg.warmup_ratio);

    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut step_losses = Vec::new();
    let mut best: Option<(f64, usize, Encoder<f32>)> = None;
    let mut step = 0u64;
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_inputs.len()).collect();
        order.shuffle(&mut seed::rng(cfg.seed, "finetune-order", &[epoch as u64]));
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            let batch: Vec<(&[TokenSequence], usize)> = chunk
                .iter()
                .map(|&i| (train_inputs[i].0.as_slice(), train_inputs[i].1))
                .collect();
            let dropout = seed::derive(cfg.seed, "finetune-dropout", &[step]);
            let (loss, grads) = model.classification_loss_and_grads(&batch, cfg.head_dropout, Some(dropout), 1.0)?;
            optimizer.step(model.params_mut(), &grads, schedule.lr(step));
            if !model.params().all_finite() {
                return Err(TrainError::Diverged(step));
            }
            total += loss * chunk.len() as f64;
            step_losses.push(loss);
        }
        let validation = if dataset.validation.is_empty() {
            None
        } else {
            Some(evaluate(&model, &dataset.validation, k, cfg.max_len)?)
        };
        // Without a validation split the last epoch wins.
        let score = validation.as_ref().map_or(epoch as f64, |r| r.macro_f1);
        if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
            best = Some((score, epoch, model.clone()));
        }
        log::info!(
            "epoch {epoch}: train loss {:.4}, validation macro-F1 {}",
            total / train_inputs.len() as f64,
            validation.as_ref().map_or("n/a".into(), |r| format!("{:.4}", r.macro_f1))
        );
        epochs.push(EpochMetrics {
            epoch,
            train_loss: total / train_inputs.len() as f64,
            validation,
        });
    }
    let (_, best_epoch, model) = match best {
        Some(b) => b,
        None => (0.0, 0, model),
    };
    Ok(FinetuneOutcome {
        model,
        epochs,
        best_epoch,
        step_losses,
    })
}

/// Class probabilities and arg-max class for each example.
pub fn predict(
    model: &Encoder<f32>,
    examples: &[LabeledExample],
    max_len: usize,
) -> Result<Vec<Prediction>, TrainError> {
    let head = model.head().ok_or(crate::model::ModelError::UntrainedHead)?;
    let segments = head.segments;
    let refs: Vec<&LabeledExample> = examples.iter().collect();
    check_compatible(model, &refs, max_len)?;
    examples
        .par_iter()
        .map(|ex| {
            let probs = model.classify(&inputs(ex, max_len, segments)?)?;
            let probabilities: Vec<f64> = probs.iter().map(|&p| p as f64).collect();
            let class = probabilities
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bp), (i, &p)| if p > bp { (i, p) } else { (bi, bp) })
                .0;
            Ok(Prediction { class, probabilities })
        })
        .collect()
}

pub fn evaluate(
    model: &Encoder<f32>,
    examples: &[LabeledExample],
    num_classes: usize,
    max_len: usize,
) -> Result<MacroReport, TrainError> {
    let preds = predict(model, examples, max_len)?;
    let truths: Vec<usize> = examples.iter().map(|e| e.class_id).collect();
    let guessed: Vec<usize> = preds.iter().map(|p| p.class).collect();
    Ok(macro_report(&confusion(&truths, &guessed, num_classes)?)?)
}
