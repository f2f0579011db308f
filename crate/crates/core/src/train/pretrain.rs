use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::optim::{AdamW, LinearSchedule};
use super::{Resume, TrainConfig, TrainError, TrainMode, TrainState};
use crate::corpus::{apply_mask, MaskedExample, MaskingConfig, PretrainRecord};
use crate::model::Encoder;
use crate::seed;
use crate::token::{build_pair_sequence, TokenSequence};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub step: u64,
    pub lr: f64,
    pub mbm: f64,
    pub sbp: f64,
    pub total: f64,
}

/// Step-by-step pre-training driver.
///
/// The batch for step `s` is a pure function of `(seed, s)`: record `i` of
/// the global stream belongs to epoch `i / N` and is drawn through that
/// epoch's seeded permutation; its mask comes from `(seed, epoch, record)`
/// and dropout from `(seed, step)`. Resuming from a checkpoint therefore
/// continues exactly as an uninterrupted run would.
pub struct Pretrainer {
    cfg: TrainConfig,
    pairs: Vec<(TokenSequence, u8)>,
    masking: MaskingConfig,
    optimizer: AdamW,
    schedule: LinearSchedule,
    step: u64,
    history: Vec<StepLoss>,
    perm: Option<(u64, Vec<usize>)>,
}

impl Pretrainer {
    pub fn new(corpus: &[PretrainRecord], model: &Encoder<f32>, cfg: TrainConfig) -> Result<Self, TrainError> {
        let optimizer = AdamW::new(model.params(), cfg.adamw());
        Self::build(corpus, model, cfg, optimizer, 0, Vec::new())
    }

    pub fn resume(corpus: &[PretrainRecord], model: &Encoder<f32>, resume: Resume) -> Result<Self, TrainError> {
        let Resume { state, optimizer } = resume;
        Self::build(corpus, model, state.config, optimizer, state.step, state.history)
    }

    fn build(
        corpus: &[PretrainRecord],
        model: &Encoder<f32>,
        cfg: TrainConfig,
        optimizer: AdamW,
        step: u64,
        history: Vec<StepLoss>,
    ) -> Result<Self, TrainError> {
        cfg.validate()?;
        if cfg.mode != TrainMode::Pretrain {
            return Err(TrainError::InvalidConfig("pre-training needs mode pretrain".into()));
        }
        if corpus.is_empty() {
            return Err(TrainError::EmptyCorpus);
        }
        let mc = model.config();
        if cfg.max_len > mc.max_positions {
            return Err(TrainError::IncompatibleModel(format!(
                "max_len {} exceeds the model's {} positions",
                cfg.max_len, mc.max_positions
            )));
        }
        let mut pairs = Vec::with_capacity(corpus.len());
        for (i, r) in corpus.iter().enumerate() {
            if let Some(t) = r.tokens_a.iter().chain(&r.tokens_b).find(|t| t.index() >= mc.vocab_size) {
                return Err(TrainError::IncompatibleModel(format!(
                    "record {i} has token {} outside the model vocabulary of {}",
                    t.0, mc.vocab_size
                )));
            }
            pairs.push((build_pair_sequence(&r.tokens_a, &r.tokens_b, cfg.max_len)?, r.sbp_label));
        }
        let schedule = LinearSchedule::new(cfg.learning_rate, cfg.steps, cfg.warmup_ratio);
        Ok(Pretrainer {
            masking: MaskingConfig::standard(mc.vocab_size),
            cfg,
            pairs,
            optimizer,
            schedule,
            step,
            history,
            perm: None,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn history(&self) -> &[StepLoss] {
        &self.history
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.cfg.steps
    }

    pub fn state(&self) -> TrainState {
        TrainState {
            config: self.cfg.clone(),
            step: self.step,
            optimizer_steps: self.optimizer.steps_taken(),
            history: self.history.clone(),
        }
    }

    pub fn optimizer(&self) -> &AdamW {
        &self.optimizer
    }

    fn record_at(&mut self, stream_index: u64) -> (u64, usize) {
        let n = self.pairs.len() as u64;
        let epoch = stream_index / n;
        if self.perm.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut p: Vec<usize> = (0..self.pairs.len()).collect();
            p.shuffle(&mut seed::rng(self.cfg.seed, "pretrain-order", &[epoch]));
            self.perm = Some((epoch, p));
        }
        let perm = &self.perm.as_ref().unwrap().1;
        (epoch, perm[(stream_index % n) as usize])
    }

    /// Masked batch for a 1-based step.
    pub fn batch(&mut self, step: u64) -> Result<Vec<MaskedExample>, TrainError> {
        let b = self.cfg.batch_size as u64;
        let mut out = Vec::with_capacity(b as usize);
        for i in (step - 1) * b..step * b {
            let (epoch, r) = self.record_at(i);
            let mut rng = seed::rng(self.cfg.seed, "mask", &[epoch, r as u64]);
            let (seq, label) = &self.pairs[r];
            out.push(apply_mask(seq, *label, &self.masking, &mut rng)?);
        }
        Ok(out)
    }

    pub fn step(&mut self, model: &mut Encoder<f32>) -> Result<StepLoss, TrainError> {
        let step = self.step + 1;
        let batch = self.batch(step)?;
        let dropout = seed::derive(self.cfg.seed, "pretrain-dropout", &[step]);
        let (loss, grads) = model.pretrain_loss_and_grads(&batch, self.cfg.objectives, Some(dropout), 1.0)?;
        let lr = self.schedule.lr(step);
        self.optimizer.step(model.params_mut(), &grads, lr);
        if !model.params().all_finite() {
            return Err(TrainError::Diverged(step));
        }
        self.step = step;
        let rec = StepLoss {
            step,
            lr,
            mbm: loss.mbm,
            sbp: loss.sbp,
            total: loss.total,
        };
        self.history.push(rec.clone());
        Ok(rec)
    }

    /// Runs until `until` steps have been taken in total (capped at the
    /// configured step count).
    pub fn run_until(
        &mut self,
        model: &mut Encoder<f32>,
        until: u64,
        mut on_step: impl FnMut(&StepLoss),
    ) -> Result<(), TrainError> {
        while self.step < until.min(self.cfg.steps) {
            let rec = self.step(model)?;
            on_step(&rec);
        }
        Ok(())
    }
}

/// Runs a full pre-training schedule and returns the per-step losses.
pub fn pretrain(
    corpus: &[PretrainRecord],
    model: &mut Encoder<f32>,
    cfg: &TrainConfig,
) -> Result<Vec<StepLoss>, TrainError> {
    let mut t = Pretrainer::new(corpus, model, cfg.clone())?;
    t.run_until(model, cfg.steps, |_| {})?;
    Ok(t.history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::token::TokenId;

    fn tiny_model() -> Encoder<f32> {
        Encoder::new(ModelConfig {
            layers: 1,
            hidden: 16,
            heads: 2,
            ffn_dim: 64,
            vocab_size: 300,
            max_positions: 32,
            dropout: 0.1,
            seed: 1,
            tie_mbm_weights: false,
        })
        .unwrap()
    }

    fn corpus(n: usize) -> Vec<PretrainRecord> {
        (0..n)
            .map(|i| PretrainRecord {
                tokens_a: (0..6).map(|j| TokenId(4 + ((i * 7 + j) % 50) as u32)).collect(),
                tokens_b: (0..5).map(|j| TokenId(60 + ((i * 3 + j) % 50) as u32)).collect(),
                sbp_label: (i % 2) as u8,
                origin: format!("r{i}"),
            })
            .collect()
    }

    fn cfg(steps: u64) -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            steps,
            learning_rate: 1e-3,
            max_len: 16,
            seed: 9,
            ..TrainConfig::desk_pretrain()
        }
    }

    #[test]
    fn empty_corpus_and_vocab_mismatch() {
        let m = tiny_model();
        assert!(matches!(Pretrainer::new(&[], &m, cfg(2)), Err(TrainError::EmptyCorpus)));
        let mut bad = corpus(2);
        bad[1].tokens_b[0] = TokenId(300);
        assert!(matches!(Pretrainer::new(&bad, &m, cfg(2)), Err(TrainError::IncompatibleModel(_))));
    }

    #[test]
    fn batches_cover_each_epoch_once() {
        let m = tiny_model();
        let mut t = Pretrainer::new(&corpus(8), &m, cfg(4)).unwrap();
        assert_eq!(t.batch(2).unwrap().len(), 4);
        let firsts: Vec<usize> = (0..8).map(|i| t.record_at(i).1).collect();
        let mut sorted = firsts.clone();
        sorted.sort();
        assert_eq!(sorted, (0..8).collect::<Vec<_>>());
        assert_ne!(firsts, (8..16).map(|i| t.record_at(i).1).collect::<Vec<_>>());
    }

    #[test]
    fn same_seed_same_history() {
        let run = || {
            let mut m = tiny_model();
            pretrain(&corpus(10), &mut m, &cfg(6)).unwrap()
        };
        assert_eq!(run(), run());
    }
}
