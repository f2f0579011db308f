use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use etbert_core::capture::{ingest_capture, CaptureError, SkipCounts};
use etbert_core::corpus::{adjacent_units, burst_units, pair_units, read_corpus, write_corpus, CorpusError, PairSource};
use etbert_core::flow::generate_bursts;
use etbert_core::model::{Encoder, ModelConfig, ModelError};
use etbert_core::randomness::{bits_from_datagrams, render_table, run_tests, BitSequence, RandomnessError, SuiteParams, TEST_NAMES};
use etbert_core::seed;
use etbert_core::store::{class_sources, flows_by_file, read_store, write_store, LabelMap, StoreError, StoredPacket};
use etbert_core::synth::{write_capture, Generator, SynthConfig};
use etbert_core::train::{
    build_finetune_dataset, evaluate, finetune, load_checkpoint, read_examples_tsv, read_split,
    save_checkpoint, write_examples_tsv, CheckpointError, DatasetConfig, DatasetMode, LabeledExample, Pretrainer,
    TrainConfig, TrainError, TrainMode,
};

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  1  unexpected internal error
  2  bad command line
  3  input file missing or unreadable, or output not writable
  4  malformed input (capture, store, corpus, dataset, label map, checkpoint)
  5  incompatible model, checkpoint or configuration
  6  not enough data (too few BURSTs, empty class, empty corpus)
  7  training diverged";

#[derive(Parser)]
#[command(name = "etbert", version, about = "Encrypted-traffic BURST pre-training and classification", after_help = EXIT_CODES)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Decode captures into a JSON-lines packet store.
    Ingest(IngestArgs),
    /// Build the same-origin pair corpus from a packet store.
    Corpus(CorpusArgs),
    /// Pre-train an encoder (resumable).
    Pretrain(PretrainArgs),
    /// Build labelled train/validation/test TSV files.
    Dataset(DatasetArgs),
    /// Fine-tune a classifier.
    Finetune(FinetuneArgs),
    /// Score a classifier on a labelled TSV file.
    Eval(EvalArgs),
    /// Run the randomness tests on stored datagrams or a raw byte file.
    Randomness(RandomnessArgs),
    /// Write synthetic labelled captures and a matching label map.
    Synth(SynthArgs),
}

#[derive(Args)]
struct ReportArg {
    /// Write a JSON run report here.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct IngestArgs {
    #[arg(required = true)]
    captures: Vec<PathBuf>,
    #[arg(short, long)]
    out: PathBuf,
    #[command(flatten)]
    report: ReportArg,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum PairsFrom {
    Burst,
    Adjacent,
}

#[derive(Args)]
struct CorpusArgs {
    store: PathBuf,
    #[arg(short, long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Units for same-origin pairs; `adjacent` is the no-BURST ablation.
    #[arg(long, value_enum, default_value = "burst")]
    pairs_from: PairsFrom,
    #[command(flatten)]
    report: ReportArg,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum Preset {
    Paper,
    Desk,
}

#[derive(Args, Serialize)]
struct ModelArgs {
    #[arg(long, value_enum, default_value = "desk")]
    preset: Preset,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    ffn_dim: Option<usize>,
    #[arg(long)]
    max_positions: Option<usize>,
}

impl ModelArgs {
    fn config(&self, seed: u64) -> ModelConfig {
        let mut c = match self.preset {
            Preset::Paper => ModelConfig::paper(),
            Preset::Desk => ModelConfig::desk(),
        };
        c.layers = self.layers.unwrap_or(c.layers);
        c.hidden = self.hidden.unwrap_or(c.hidden);
        c.heads = self.heads.unwrap_or(c.heads);
        c.ffn_dim = self.ffn_dim.unwrap_or(c.ffn_dim);
        c.max_positions = self.max_positions.unwrap_or(c.max_positions);
        c.with_seed(seed)
    }
}

#[derive(Args, Serialize)]
struct TrainArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    warmup_ratio: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Sequence length including framing tokens.
    #[arg(long)]
    max_len: Option<usize>,
}

impl TrainArgs {
    fn apply(&self, mut c: TrainConfig) -> TrainConfig {
        c.seed = self.seed;
        c.batch_size = self.batch_size.unwrap_or(c.batch_size);
        c.learning_rate = self.lr.unwrap_or(c.learning_rate);
        c.warmup_ratio = self.warmup_ratio.unwrap_or(c.warmup_ratio);
        c.weight_decay = self.weight_decay.unwrap_or(c.weight_decay);
        c.max_len = self.max_len.unwrap_or(c.max_len);
        c
    }
}

#[derive(Args)]
struct PretrainArgs {
    corpus: PathBuf,
    /// Checkpoint to write (includes optimizer state for resuming).
    #[arg(short, long)]
    out: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long)]
    steps: Option<u64>,
    /// Continue from a checkpoint written by an earlier pretrain run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this many total steps (the schedule still spans `--steps`).
    #[arg(long)]
    stop_at: Option<u64>,
    /// Also save every N steps.
    #[arg(long)]
    checkpoint_every: Option<u64>,
    #[command(flatten)]
    report: ReportArg,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
enum Mode {
    Packet,
    Flow,
}

#[derive(Args)]
struct DatasetArgs {
    store: PathBuf,
    /// Label map: `file <glob> <class>` or `host <addr>[:port] <class>` per line.
    #[arg(long)]
    labels: PathBuf,
    /// Output directory for train.tsv, validation.tsv and test.tsv.
    #[arg(short, long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "packet")]
    mode: Mode,
    #[arg(long, default_value_t = 500)]
    cap_flows: usize,
    #[arg(long, default_value_t = 5000)]
    cap_packets: usize,
    #[arg(long, default_value = "8:1:1", value_parser = parse_split)]
    split: [usize; 3],
    /// Keep this fraction of each class's training examples.
    #[arg(long)]
    fraction: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Keep per-packet token runs separate (flow mode ablation).
    #[arg(long)]
    concat_flow: bool,
    #[command(flatten)]
    report: ReportArg,
}

fn parse_split(s: &str) -> std::result::Result<[usize; 3], String> {
    let parts: Vec<usize> = s
        .split(':')
        .map(|p| p.parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    <[usize; 3]>::try_from(parts).map_err(|_| "expected three weights such as 8:1:1".to_string())
}

#[derive(Args)]
struct FinetuneArgs {
    /// Directory holding train.tsv, validation.tsv and test.tsv.
    data: PathBuf,
    /// Pre-trained checkpoint.
    #[arg(long, required_unless_present = "no_pretrain")]
    checkpoint: Option<PathBuf>,
    /// Start from a freshly initialised encoder instead.
    #[arg(long)]
    no_pretrain: bool,
    #[arg(short, long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "packet")]
    mode: Mode,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    train: TrainArgs,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    head_dropout: Option<f64>,
    /// Concatenate per-packet pooled vectors (flow mode ablation).
    #[arg(long)]
    concat_flow: bool,
    #[command(flatten)]
    report: ReportArg,
}

#[derive(Args)]
struct EvalArgs {
    checkpoint: PathBuf,
    test: PathBuf,
    #[arg(long)]
    max_len: Option<usize>,
    #[command(flatten)]
    report: ReportArg,
}

#[derive(Args)]
struct RandomnessArgs {
    input: PathBuf,
    /// Treat the input as raw bytes instead of a packet store.
    #[arg(long)]
    raw: bool,
    /// Comma-separated subset of tests.
    #[arg(long, value_delimiter = ',')]
    tests: Option<Vec<String>>,
    #[arg(long, default_value_t = 128)]
    block_len: usize,
    /// Write the p-value table here as well as to stdout.
    #[arg(short, long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    report: ReportArg,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(short, long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 100)]
    flows_per_class: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Missing(String),
    #[error("{0}")]
    Malformed(String),
    #[error("{0}")]
    Incompatible(String),
    #[error("{0}")]
    Insufficient(String),
    #[error("{0}")]
    Diverged(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Other(_) => 1,
            CliError::Missing(_) => 3,
            CliError::Malformed(_) => 4,
            CliError::Incompatible(_) => 5,
            CliError::Insufficient(_) => 6,
            CliError::Diverged(_) => 7,
        }
    }
}

fn io_error(path: &Path, e: std::io::Error) -> CliError {
    CliError::Missing(format!("{}: {e}", path.display()))
}

impl From<CaptureError> for CliError {
    fn from(e: CaptureError) -> Self {
        match e {
            CaptureError::Open { .. } | CaptureError::Io(_) => CliError::Missing(e.to_string()),
            _ => CliError::Malformed(e.to_string()),
        }
    }
}

impl From<StoreError> for CliError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::Io { .. } => CliError::Missing(e.to_string()),
            StoreError::Malformed { .. } => CliError::Malformed(e.to_string()),
        }
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::InsufficientBursts(_) => CliError::Insufficient(e.to_string()),
            CorpusError::Io(_) => CliError::Missing(e.to_string()),
            _ => CliError::Malformed(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Incompatible(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Io(_) => CliError::Missing(e.to_string()),
            CheckpointError::ShapeMismatch(_) => CliError::Incompatible(e.to_string()),
            _ => CliError::Malformed(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::EmptyCorpus | TrainError::ClassEmpty(_) => CliError::Insufficient(e.to_string()),
            TrainError::IncompatibleModel(_) | TrainError::InvalidConfig(_) | TrainError::Model(_) => {
                CliError::Incompatible(e.to_string())
            }
            TrainError::Diverged(_) => CliError::Diverged(e.to_string()),
            TrainError::MalformedDataset { .. } | TrainError::Token(_) => CliError::Malformed(e.to_string()),
            TrainError::Corpus(c) => c.into(),
            TrainError::Checkpoint(c) => c.into(),
            TrainError::Io(_) => CliError::Missing(e.to_string()),
            TrainError::Metrics(_) => CliError::Other(e.to_string()),
        }
    }
}

impl From<RandomnessError> for CliError {
    fn from(e: RandomnessError) -> Self {
        match e {
            RandomnessError::InvalidParameter(_) => CliError::Incompatible(e.to_string()),
            _ => CliError::Insufficient(e.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn write_report(arg: &ReportArg, value: serde_json::Value) -> Result<()> {
    if let Some(path) = &arg.report {
        let text = serde_json::to_string_pretty(&value).map_err(|e| CliError::Other(e.to_string()))?;
        std::fs::write(path, text + "\n").map_err(|e| io_error(path, e))?;
    }
    Ok(())
}

fn ingest(a: &IngestArgs) -> Result<()> {
    let mut stored = Vec::new();
    let mut per_file = Vec::new();
    let mut skipped = SkipCounts::default();
    for path in &a.captures {
        let (packets, skips) = ingest_capture(path)?;
        let file = path.display().to_string();
        per_file.push(json!({"file": file, "packets": packets.len(), "skipped": skips}));
        skipped.merge(&skips);
        stored.extend(packets.into_iter().map(|packet| StoredPacket {
            file: file.clone(),
            packet,
        }));
    }
    write_store(&a.out, &stored)?;
    println!("{} packets from {} captures, {} frames skipped", stored.len(), a.captures.len(), skipped.total());
    write_report(
        &a.report,
        json!({
            "command": "ingest",
            "config": {"captures": a.captures, "out": a.out},
            "packets": stored.len(),
            "skipped": skipped,
            "files": per_file,
        }),
    )
}

fn corpus(a: &CorpusArgs) -> Result<()> {
    let packets = read_store(&a.store)?;
    let flows: Vec<_> = flows_by_file(&packets).into_iter().flat_map(|(_, f)| f).collect();
    let (units, stats) = match a.pairs_from {
        PairsFrom::Burst => {
            let bursts: Vec<_> = flows.iter().flat_map(generate_bursts).collect();
            burst_units(&bursts)
        }
        PairsFrom::Adjacent => adjacent_units(&flows),
    };
    let records = pair_units(&units, &mut seed::rng(a.seed, "corpus-pairs", &[]))?;
    write_corpus(&records, &a.out)?;
    let label0 = records.iter().filter(|r| r.sbp_label == 0).count();
    println!(
        "{} flows, {} units ({} too short), {} pairs ({} same-origin)",
        flows.len(),
        stats.bursts,
        stats.dropped_short,
        records.len(),
        label0
    );
    let source = match a.pairs_from {
        PairsFrom::Burst => PairSource::Burst,
        PairsFrom::Adjacent => PairSource::Adjacent,
    };
    write_report(
        &a.report,
        json!({
            "command": "corpus",
            "config": {"store": a.store, "out": a.out, "seed": a.seed, "pairs_from": source},
            "flows": flows.len(),
            "stats": stats,
            "records": records.len(),
            "same_origin": label0,
        }),
    )
}

fn pretrain(a: &PretrainArgs) -> Result<()> {
    let corpus = read_corpus(&a.corpus)?;
    let (mut model, mut trainer) = match &a.resume {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            let resume = ck
                .resume
                .ok_or_else(|| CliError::Incompatible(format!("{} holds no training state", path.display())))?;
            let trainer = Pretrainer::resume(&corpus, &ck.model, resume)?;
            (ck.model, trainer)
        }
        None => {
            let mut cfg = a.train.apply(match a.model.preset {
                Preset::Paper => TrainConfig::paper_pretrain(),
                Preset::Desk => TrainConfig::desk_pretrain(),
            });
            cfg.steps = a.steps.unwrap_or(cfg.steps);
            let model = Encoder::new(a.model.config(a.train.seed))?;
            let trainer = Pretrainer::new(&corpus, &model, cfg)?;
            (model, trainer)
        }
    };
    let total = trainer.config().steps;
    let until = a.stop_at.unwrap_or(total).min(total);
    let every = a.checkpoint_every.unwrap_or(0);
    while trainer.step_count() < until {
        let rec = trainer.step(&mut model)?;
        if rec.step % 50 == 0 || rec.step == until {
            log::info!("step {}: mbm {:.4} sbp {:.4} lr {:.2e}", rec.step, rec.mbm, rec.sbp, rec.lr);
        }
        if every > 0 && rec.step % every == 0 && rec.step < until {
            save_checkpoint(&a.out, &model, &[], Some((&trainer.state(), trainer.optimizer())))?;
        }
    }
    save_checkpoint(&a.out, &model, &[], Some((&trainer.state(), trainer.optimizer())))?;
    let history = trainer.history();
    if let Some(last) = history.last() {
        println!("step {}/{}: total loss {:.4}", last.step, total, last.total);
    }
    write_report(
        &a.report,
        json!({
            "command": "pretrain",
            "config": {"corpus": a.corpus, "out": a.out, "resume": a.resume, "model": model.config(), "train": trainer.config()},
            "steps": trainer.step_count(),
            "loss_history": history,
        }),
    )
}

fn dataset(a: &DatasetArgs) -> Result<()> {
    let packets = read_store(&a.store)?;
    let labels = LabelMap::load(&a.labels)?;
    let (sources, unlabelled) = class_sources(&packets, &labels);
    if sources.len() < 2 {
        return Err(CliError::Insufficient(format!(
            "the label map matched {} class(es); at least 2 are needed",
            sources.len()
        )));
    }
    let cfg = DatasetConfig {
        mode: match a.mode {
            Mode::Packet => DatasetMode::Packet,
            Mode::Flow => DatasetMode::Flow,
        },
        cap_flows: a.cap_flows,
        cap_packets: a.cap_packets,
        split: a.split,
        fraction: a.fraction,
        seed: a.seed,
        concat_flow: a.concat_flow,
        ..DatasetConfig::default()
    };
    let ds = build_finetune_dataset(&sources, &cfg)?;
    std::fs::create_dir_all(&a.out).map_err(|e| io_error(&a.out, e))?;
    for (name, part) in [("train", &ds.train), ("validation", &ds.validation), ("test", &ds.test)] {
        write_examples_tsv(a.out.join(format!("{name}.tsv")), &ds.classes, part)?;
    }
    println!(
        "{} classes: {} train, {} validation, {} test ({} unlabelled flows)",
        ds.classes.len(),
        ds.train.len(),
        ds.validation.len(),
        ds.test.len(),
        unlabelled
    );
    let per_class: Vec<_> = (0..ds.classes.len())
        .map(|c| {
            let n = |v: &[LabeledExample]| v.iter().filter(|e| e.class_id == c).count();
            json!({"class": ds.classes[c], "train": n(&ds.train), "validation": n(&ds.validation), "test": n(&ds.test)})
        })
        .collect();
    write_report(
        &a.report,
        json!({
            "command": "dataset",
            "config": {"store": a.store, "labels": a.labels, "out": a.out, "dataset": cfg},
            "unlabelled_flows": unlabelled,
            "classes": per_class,
        }),
    )
}

fn finetune_cmd(a: &FinetuneArgs) -> Result<()> {
    let d = &a.data;
    let ds = read_split(d.join("train.tsv"), d.join("validation.tsv"), d.join("test.tsv"))?;
    let mode = match a.mode {
        Mode::Packet => TrainMode::FinetunePacket,
        Mode::Flow => TrainMode::FinetuneFlow,
    };
    let mut cfg = a.train.apply(match a.model.preset {
        Preset::Paper => TrainConfig::paper_finetune(mode),
        Preset::Desk => TrainConfig::desk_finetune(mode),
    });
    cfg.epochs = a.epochs.unwrap_or(cfg.epochs);
    cfg.head_dropout = a.head_dropout.unwrap_or(cfg.head_dropout);
    cfg.concat_flow = a.concat_flow;
    let model = match (&a.checkpoint, a.no_pretrain) {
        (Some(_), true) => {
            return Err(CliError::Incompatible("--checkpoint and --no-pretrain exclude each other".into()))
        }
        (Some(path), false) => {
            let ck = load_checkpoint(path)?;
            if ck.model.head().is_some() {
                return Err(CliError::Incompatible(format!("{} is already a classifier", path.display())));
            }
            ck.model
        }
        (None, _) => Encoder::new(a.model.config(a.train.seed))?,
    };
    let outcome = finetune(&ds, model, &cfg)?;
    save_checkpoint(&a.out, &outcome.model, &ds.classes, None)?;
    let test = if ds.test.is_empty() {
        None
    } else {
        let r = evaluate(&outcome.model, &ds.test, ds.classes.len(), cfg.max_len)?;
        print!("{}", r.table(Some(&ds.classes)));
        Some(r)
    };
    println!("best epoch {}", outcome.best_epoch);
    write_report(
        &a.report,
        json!({
            "command": "finetune",
            "config": {"data": a.data, "checkpoint": a.checkpoint, "no_pretrain": a.no_pretrain, "out": a.out, "model": outcome.model.config(), "train": cfg},
            "classes": ds.classes,
            "epochs": outcome.epochs,
            "best_epoch": outcome.best_epoch,
            "loss_history": outcome.step_losses,
            "test": test,
        }),
    )
}

fn eval(a: &EvalArgs) -> Result<()> {
    let ck = load_checkpoint(&a.checkpoint)?;
    if ck.model.head().is_none() {
        return Err(CliError::Incompatible(format!("{} has no classification head", a.checkpoint.display())));
    }
    let rows = read_examples_tsv(&a.test)?;
    let examples = rows
        .into_iter()
        .enumerate()
        .map(|(i, (label, tokens))| {
            let class_id = ck.labels.iter().position(|l| *l == label).ok_or_else(|| {
                CliError::Incompatible(format!("{}: row {}: class {label:?} unknown to the checkpoint", a.test.display(), i + 2))
            })?;
            Ok(LabeledExample { class_id, tokens })
        })
        .collect::<Result<Vec<_>>>()?;
    let max_len = a.max_len.unwrap_or(128.min(ck.model.config().max_positions));
    let report = evaluate(&ck.model, &examples, ck.labels.len(), max_len)?;
    print!("{}", report.table(Some(&ck.labels)));
    write_report(
        &a.report,
        json!({
            "command": "eval",
            "config": {"checkpoint": a.checkpoint, "test": a.test, "max_len": max_len},
            "classes": ck.labels,
            "metrics": report,
        }),
    )
}

fn randomness(a: &RandomnessArgs) -> Result<()> {
    let names: Vec<String> = a
        .tests
        .clone()
        .unwrap_or_else(|| TEST_NAMES.iter().map(|s| s.to_string()).collect());
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    let seq = if a.raw {
        let bytes = std::fs::read(&a.input).map_err(|e| io_error(&a.input, e))?;
        BitSequence::from_bytes(&bytes)?
    } else {
        let packets = read_store(&a.input)?;
        bits_from_datagrams(packets.iter().map(|p| p.packet.datagram.as_slice()))?
    };
    let params = SuiteParams {
        block_len: a.block_len,
        ..SuiteParams::default()
    };
    let results = run_tests(&seq, &names, params)?;
    let table = render_table(&[(a.input.display().to_string(), results.clone())]);
    print!("{table}");
    if let Some(out) = &a.out {
        etbert_core::io::write_atomic(out, |w| std::io::Write::write_all(w, table.as_bytes())).map_err(|e| io_error(out, e))?;
    }
    let rows: Vec<_> = results
        .iter()
        .map(|(n, r)| match r {
            Ok(t) => json!({"test": n, "result": t}),
            Err(e) => json!({"test": n, "error": e.to_string()}),
        })
        .collect();
    write_report(
        &a.report,
        json!({
            "command": "randomness",
            "config": {"input": a.input, "raw": a.raw, "tests": names, "params": params},
            "bits": seq.len(),
            "results": rows,
        }),
    )
}

fn synth(a: &SynthArgs) -> Result<()> {
    let gen = Generator::new(SynthConfig {
        classes: a.classes,
        seed: a.seed,
        ..SynthConfig::default()
    });
    std::fs::create_dir_all(&a.out).map_err(|e| io_error(&a.out, e))?;
    let mut map = String::new();
    for c in 0..a.classes {
        let name = format!("class{c}.pcap");
        let path = a.out.join(&name);
        write_capture(&path, &gen.flows("labelled", c, a.flows_per_class))?;
        map.push_str(&format!("file {name} class{c}\n"));
    }
    let path = a.out.join("labels.txt");
    std::fs::write(&path, map).map_err(|e| io_error(&path, e))?;
    println!("{} captures and labels.txt in {}", a.classes, a.out.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Ingest(a) => ingest(a),
        Command::Corpus(a) => corpus(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Dataset(a) => dataset(a),
        Command::Finetune(a) => finetune_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Randomness(a) => randomness(a),
        Command::Synth(a) => synth(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = std::env::var("ETB_THREADS").ok().and_then(|s| s.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("ETB_THREADS ignored: {e}");
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
