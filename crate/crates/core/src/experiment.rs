//! Synthetic end-to-end run: pre-train on unlabelled synthetic bursts, then
//! fine-tune packet classifiers with and without the pre-trained weights.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::capture::Protocol;
use crate::corpus::{make_pairs, PretrainRecord};
use crate::flow::{assemble_flows, generate_bursts, Flow};
use crate::metrics::MacroReport;
use crate::model::{Encoder, ModelConfig};
use crate::seed;
use crate::synth::{Generator, SynthConfig};
use crate::train::{
    build_finetune_dataset, evaluate, finetune, ClassSource, DatasetConfig, DatasetMode, Pretrainer, SplitDataset,
    StepLoss, TrainConfig, TrainError, TrainMode,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticRunConfig {
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub bursts: usize,
    /// Labelled packets generated per class before the 8:1:1 split.
    pub packets_per_class: usize,
    /// Training packets kept per class.
    pub train_per_class: usize,
    pub seed: u64,
}

impl SyntheticRunConfig {
    pub fn desk(seed: u64) -> Self {
        SyntheticRunConfig {
            // Short UDP packets with a constant header and long bursts. Random
            // headers let pair prediction memorise records instead.
            synth: SynthConfig {
                payload_min: 2,
                payload_max: 24,
                packets_per_flow: (12, 40),
                burst_packets: (12, 20),
                random_header: false,
                transport: Protocol::Udp,
                seed,
                ..SynthConfig::default()
            },
            model: ModelConfig::desk().with_seed(seed),
            pretrain: TrainConfig {
                learning_rate: 3e-3,
                ..TrainConfig::desk_pretrain().with_seed(seed)
            },
            finetune: TrainConfig {
                learning_rate: 1e-3,
                head_dropout: 0.1,
                ..TrainConfig::desk_finetune(TrainMode::FinetunePacket).with_seed(seed)
            },
            bursts: 2000,
            packets_per_class: 1000,
            train_per_class: 100,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticRunReport {
    pub corpus_records: usize,
    pub sbp_label0_fraction: f64,
    pub pretrain_history: Vec<StepLoss>,
    pub train_examples: usize,
    pub test_examples: usize,
    pub pretrained: MacroReport,
    pub scratch: MacroReport,
    pub pretrain_secs: f64,
    pub finetune_secs: f64,
}

/// Unlabelled flows (all classes mixed) until `bursts` BURSTs are available;
/// the corpus is built from exactly that many.
pub fn pretrain_corpus(gen: &Generator, bursts: usize, seed: u64) -> Result<Vec<PretrainRecord>, TrainError> {
    let classes = gen.config().classes;
    let mut packets = Vec::new();
    let mut count = 0;
    let mut i = 0;
    while count < bursts {
        let f = gen.flow("pretrain", i % classes, i / classes);
        count += generate_bursts(&assemble_flows(f.packets.clone())[0]).len();
        packets.extend(f.packets);
        i += 1;
    }
    let flows: Vec<Flow> = assemble_flows(packets);
    let all: Vec<_> = flows.iter().flat_map(generate_bursts).take(bursts).collect();
    Ok(make_pairs(&all, &mut seed::rng(seed, "synthetic-pairs", &[]))?)
}

/// Labelled packets from a stream disjoint from the pre-training one.
pub fn labelled_dataset(gen: &Generator, cfg: &SyntheticRunConfig) -> Result<SplitDataset, TrainError> {
    let sources: Vec<ClassSource> = (0..gen.config().classes)
        .map(|c| {
            let mut flows = Vec::new();
            let mut n = 0;
            let mut i = 0;
            while n < cfg.packets_per_class {
                let f = gen.flow("labelled", c, i);
                let mut d: Vec<Vec<u8>> = f.packets.into_iter().map(|p| p.datagram).collect();
                d.truncate(cfg.packets_per_class - n);
                n += d.len();
                flows.push(d);
                i += 1;
            }
            ClassSource {
                name: format!("class{c}"),
                flows,
            }
        })
        .collect();
    let n_train = cfg.packets_per_class - 2 * (cfg.packets_per_class / 10);
    build_finetune_dataset(
        &sources,
        &DatasetConfig {
            mode: DatasetMode::Packet,
            fraction: Some(cfg.train_per_class as f64 / n_train as f64),
            seed: cfg.seed,
            ..DatasetConfig::default()
        },
    )
}

pub fn run_synthetic(cfg: &SyntheticRunConfig) -> Result<SyntheticRunReport, TrainError> {
    let gen = Generator::new(cfg.synth.clone());
    let corpus = pretrain_corpus(&gen, cfg.bursts, cfg.seed)?;
    let label0 = corpus.iter().filter(|r| r.sbp_label == 0).count() as f64 / corpus.len() as f64;

    let t0 = Instant::now();
    let mut model = Encoder::new(cfg.model.clone())?;
    let mut trainer = Pretrainer::new(&corpus, &model, cfg.pretrain.clone())?;
    trainer.run_until(&mut model, cfg.pretrain.steps, |_| {})?;
    let pretrain_secs = t0.elapsed().as_secs_f64();
    let pretrain_history = trainer.history().to_vec();

    let ds = labelled_dataset(&gen, cfg)?;
    let k = ds.classes.len();
    let t1 = Instant::now();
    let tuned = finetune(&ds, model, &cfg.finetune)?;
    let pretrained = evaluate(&tuned.model, &ds.test, k, cfg.finetune.max_len)?;
    let scratch_model = finetune(&ds, Encoder::new(cfg.model.clone())?, &cfg.finetune)?;
    let scratch = evaluate(&scratch_model.model, &ds.test, k, cfg.finetune.max_len)?;
    Ok(SyntheticRunReport {
        corpus_records: corpus.len(),
        sbp_label0_fraction: label0,
        pretrain_history,
        train_examples: ds.train.len(),
        test_examples: ds.test.len(),
        pretrained,
        scratch,
        pretrain_secs,
        finetune_secs: t1.elapsed().as_secs_f64(),
    })
}
