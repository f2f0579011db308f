use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::seed;
use crate::token::{encode_bytes, TokenId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetMode {
    Packet,
    Flow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub mode: DatasetMode,
    pub cap_flows: usize,
    pub cap_packets: usize,
    /// Train : validation : test weights.
    pub split: [usize; 3],
    /// Keep only `ceil(fraction * n)` training examples per class.
    pub fraction: Option<f64>,
    pub seed: u64,
    pub packets_per_flow: usize,
    /// Keep per-packet token runs apart (joined by `[SEP]`) instead of
    /// stitching the flow's bytes into one run.
    pub concat_flow: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            mode: DatasetMode::Packet,
            cap_flows: 500,
            cap_packets: 5000,
            split: [8, 1, 1],
            fraction: None,
            seed: 0,
            packets_per_flow: 5,
            concat_flow: false,
        }
    }
}

/// One class's raw material: flows as ordered lists of datagrams.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassSource {
    pub name: String,
    pub flows: Vec<Vec<Vec<u8>>>,
}

/// Content tokens of one example (no `[CLS]`/`[SEP]` framing). With
/// concatenated-flow inputs, per-packet runs are separated by `[SEP]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub class_id: usize,
    pub tokens: Vec<TokenId>,
}

impl LabeledExample {
    /// Per-packet token runs (a single run unless concatenated).
    pub fn units(&self) -> Vec<&[TokenId]> {
        self.tokens.split(|t| *t == TokenId::SEP).filter(|u| !u.is_empty()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitDataset {
    pub classes: Vec<String>,
    pub train: Vec<LabeledExample>,
    pub validation: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
}

fn samples(src: &ClassSource, cfg: &DatasetConfig) -> Result<Vec<Vec<TokenId>>, TrainError> {
    let mut out = Vec::new();
    match cfg.mode {
        DatasetMode::Packet => {
            for d in src.flows.iter().flatten() {
                if d.len() >= 2 {
                    out.push(encode_bytes(d)?);
                }
            }
        }
        DatasetMode::Flow if cfg.concat_flow => {
            for flow in &src.flows {
                let mut tokens = Vec::new();
                for d in flow.iter().filter(|d| d.len() >= 2).take(cfg.packets_per_flow) {
                    if !tokens.is_empty() {
                        tokens.push(TokenId::SEP);
                    }
                    tokens.extend(encode_bytes(d)?);
                }
                if !tokens.is_empty() {
                    out.push(tokens);
                }
            }
        }
        DatasetMode::Flow => {
            for flow in &src.flows {
                let stitched: Vec<u8> = flow
                    .iter()
                    .filter(|d| !d.is_empty())
                    .take(cfg.packets_per_flow)
                    .flatten()
                    .copied()
                    .collect();
                if stitched.len() >= 2 {
                    out.push(encode_bytes(&stitched)?);
                }
            }
        }
    }
    Ok(out)
}

/// Shuffles each class with its own seeded stream, applies the per-class
/// cap, splits by the configured ratio (validation and test get
/// `floor(n * w / sum)`, train the rest) and finally applies the few-shot
/// fraction to the training split only.
pub fn build_finetune_dataset(classes: &[ClassSource], cfg: &DatasetConfig) -> Result<SplitDataset, TrainError> {
    if cfg.split.iter().sum::<usize>() == 0 {
        return Err(TrainError::InvalidConfig("split weights sum to zero".into()));
    }
    if let Some(f) = cfg.fraction {
        if !(f > 0.0 && f <= 1.0) {
            return Err(TrainError::InvalidConfig(format!("fraction {f} outside (0, 1]")));
        }
    }
    let cap = match cfg.mode {
        DatasetMode::Packet => cfg.cap_packets,
        DatasetMode::Flow => cfg.cap_flows,
    };
    let total: usize = cfg.split.iter().sum();
    let mut ds = SplitDataset {
        classes: classes.iter().map(|c| c.name.clone()).collect(),
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
    };
    for (class_id, src) in classes.iter().enumerate() {
        let mut items = samples(src, cfg)?;
        if items.is_empty() {
            return Err(TrainError::ClassEmpty(src.name.clone()));
        }
        items.shuffle(&mut seed::rng(cfg.seed, "dataset", &[class_id as u64]));
        items.truncate(cap);
        let n = items.len();
        let n_val = n * cfg.split[1] / total;
        let n_test = n * cfg.split[2] / total;
        let n_train = n - n_val - n_test;
        let keep = match cfg.fraction {
            Some(f) => ((f * n_train as f64).ceil() as usize).min(n_train),
            None => n_train,
        };
        let mut it = items.into_iter().map(|tokens| LabeledExample { class_id, tokens });
        ds.train.extend(it.by_ref().take(n_train).collect::<Vec<_>>().into_iter().take(keep));
        ds.validation.extend(it.by_ref().take(n_val));
        ds.test.extend(it);
    }
    Ok(ds)
}

/// Writes `label<TAB>tokens` rows, labels as class names.
pub fn write_examples_tsv(
    path: impl AsRef<Path>,
    classes: &[String],
    examples: &[LabeledExample],
) -> Result<(), TrainError> {
    crate::io::write_atomic(path.as_ref(), |w| {
        writeln!(w, "label\ttokens")?;
        for ex in examples {
            write!(w, "{}\t", classes[ex.class_id])?;
            for (i, t) in ex.tokens.iter().enumerate() {
                if i > 0 {
                    w.write_all(b" ")?;
                }
                write!(w, "{}", t.0)?;
            }
            w.write_all(b"\n")?;
        }
        Ok(())
    })?;
    Ok(())
}

/// Reads `(class name, tokens)` rows.
pub fn read_examples_tsv(path: impl AsRef<Path>) -> Result<Vec<(String, Vec<TokenId>)>, TrainError> {
    let path = path.as_ref();
    let bad = |line: usize, reason: String| TrainError::MalformedDataset {
        path: path.display().to_string(),
        line,
        reason,
    };
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if i == 0 {
            if line.trim_end() != "label\ttokens" {
                return Err(bad(1, "expected header `label<TAB>tokens`".into()));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let (label, tokens) = line
            .split_once('\t')
            .ok_or_else(|| bad(i + 1, "missing tab separator".into()))?;
        if label.is_empty() {
            return Err(bad(i + 1, "empty label".into()));
        }
        let ids = tokens
            .split_ascii_whitespace()
            .map(|t| t.parse::<u32>().map(TokenId))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| bad(i + 1, format!("token id: {e}")))?;
        if ids.is_empty() {
            return Err(bad(i + 1, "no tokens".into()));
        }
        out.push((label.to_string(), ids));
    }
    Ok(out)
}

/// Loads train/validation/test files; classes are the sorted union of
/// labels across the three.
pub fn read_split(
    train: impl AsRef<Path>,
    validation: impl AsRef<Path>,
    test: impl AsRef<Path>,
) -> Result<SplitDataset, TrainError> {
    let parts = [
        read_examples_tsv(train)?,
        read_examples_tsv(validation)?,
        read_examples_tsv(test)?,
    ];
    let classes: Vec<String> = parts
        .iter()
        .flatten()
        .map(|(l, _)| l.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let convert = |rows: &[(String, Vec<TokenId>)]| -> Vec<LabeledExample> {
        rows.iter()
            .map(|(l, t)| LabeledExample {
                class_id: classes.binary_search(l).unwrap(),
                tokens: t.clone(),
            })
            .collect()
    };
    let [tr, va, te] = &parts;
    Ok(SplitDataset {
        train: convert(tr),
        validation: convert(va),
        test: convert(te),
        classes: classes.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn class(name: &str, packets: usize) -> ClassSource {
        ClassSource {
            name: name.into(),
            flows: (0..packets).map(|i| vec![vec![i as u8, (i >> 8) as u8, 7]]).collect(),
        }
    }

    fn counts(ds: &SplitDataset) -> (usize, usize, usize) {
        (ds.train.len(), ds.validation.len(), ds.test.len())
    }

    #[test]
    fn cap_then_split() {
        let ds = build_finetune_dataset(&[class("a", 10_000)], &DatasetConfig::default()).unwrap();
        assert_eq!(counts(&ds), (4000, 500, 500));
        let ds = build_finetune_dataset(&[class("a", 10)], &DatasetConfig::default()).unwrap();
        assert_eq!(counts(&ds), (8, 1, 1));
        let ds = build_finetune_dataset(&[class("a", 19)], &DatasetConfig::default()).unwrap();
        assert_eq!(counts(&ds), (17, 1, 1));
    }

    #[test]
    fn fraction_touches_train_only() {
        let cfg = DatasetConfig {
            fraction: Some(0.1),
            ..Default::default()
        };
        let ds = build_finetune_dataset(&[class("a", 500)], &cfg).unwrap();
        assert_eq!(counts(&ds), (40, 50, 50));
        let cfg = DatasetConfig {
            fraction: Some(0.4),
            ..Default::default()
        };
        let ds = build_finetune_dataset(&[class("a", 13)], &cfg).unwrap();
        // ceil(0.4 * 11) = 5
        assert_eq!(counts(&ds), (5, 1, 1));
    }

    #[test]
    fn splits_are_disjoint_and_seeded() {
        let cfg = DatasetConfig::default();
        let a = build_finetune_dataset(&[class("a", 300), class("b", 200)], &cfg).unwrap();
        let b = build_finetune_dataset(&[class("a", 300), class("b", 200)], &cfg).unwrap();
        assert_eq!(a, b);
        let mut all: Vec<_> = a.train.iter().chain(&a.validation).chain(&a.test).collect();
        let n = all.len();
        all.sort_by(|x, y| (x.class_id, &x.tokens).cmp(&(y.class_id, &y.tokens)));
        all.dedup();
        assert_eq!(all.len(), n);
    }

    #[test]
    fn empty_class_is_an_error() {
        let empty = ClassSource {
            name: "quiet".into(),
            flows: vec![vec![vec![1]]],
        };
        assert!(matches!(
            build_finetune_dataset(&[class("a", 5), empty], &DatasetConfig::default()),
            Err(TrainError::ClassEmpty(n)) if n == "quiet"
        ));
    }

    #[test]
    fn flow_inputs_use_first_packets() {
        let src = ClassSource {
            name: "f".into(),
            flows: vec![vec![vec![1, 2], vec![], vec![3], vec![4, 5], vec![6, 7], vec![8, 9], vec![10, 11]]],
        };
        let stitched = DatasetConfig {
            mode: DatasetMode::Flow,
            split: [1, 0, 0],
            ..Default::default()
        };
        let ds = build_finetune_dataset(std::slice::from_ref(&src), &stitched).unwrap();
        assert_eq!(ds.train[0].tokens, encode_bytes(&[1, 2, 3, 4, 5, 6, 7, 8, 9]).unwrap());
        let concat = DatasetConfig {
            concat_flow: true,
            ..stitched
        };
        let ds = build_finetune_dataset(&[src], &concat).unwrap();
        let units = ds.train[0].units();
        assert_eq!(units.len(), 5);
        assert_eq!(units[4], encode_bytes(&[10, 11]).unwrap().as_slice());
    }

    #[test]
    fn tsv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = build_finetune_dataset(&[class("web", 30), class("chat", 20)], &DatasetConfig::default()).unwrap();
        let p = |n: &str| dir.path().join(n);
        write_examples_tsv(p("train.tsv"), &ds.classes, &ds.train).unwrap();
        write_examples_tsv(p("val.tsv"), &ds.classes, &ds.validation).unwrap();
        write_examples_tsv(p("test.tsv"), &ds.classes, &ds.test).unwrap();
        let back = read_split(p("train.tsv"), p("val.tsv"), p("test.tsv")).unwrap();
        assert_eq!(back.classes, vec!["chat".to_string(), "web".into()]);
        assert_eq!(back.train.len(), ds.train.len());
        assert_eq!(back.train[0].tokens, ds.train[0].tokens);
        assert_eq!(back.classes[back.train[0].class_id], ds.classes[ds.train[0].class_id]);
        std::fs::write(p("bad.tsv"), "label\ttokens\nweb\t5 x\n").unwrap();
        assert!(matches!(
            read_examples_tsv(p("bad.tsv")),
            Err(TrainError::MalformedDataset { line: 2, .. })
        ));
    }
}
