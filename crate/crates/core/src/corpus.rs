//! Self-supervised corpus: same-origin sub-BURST pairs and masking.
//!
//! Pairs are stored unmasked. Masking happens when a batch is assembled,
//! with a generator seeded from `(run seed, epoch, record index)`, so every
//! epoch sees fresh masks while runs stay reproducible.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow::{burst_bytes, split_half, Burst, Flow};
use crate::seed::Rng;
use crate::token::{encode_bytes, TokenId, TokenSequence, SPECIAL_COUNT};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("need at least 2 eligible units to draw negatives, got {0}")]
    InsufficientBursts(usize),
    #[error("line {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("corpus i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("sequence has no maskable token")]
    NothingToMask,
}

/// An unmasked segment pair with its same-origin label
/// (0 = both halves from one BURST, 1 = unpaired).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainRecord {
    pub tokens_a: Vec<TokenId>,
    pub tokens_b: Vec<TokenId>,
    pub sbp_label: u8,
    pub origin: String,
}

/// Which units supply the two segments of a pre-training pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairSource {
    /// Two halves of one BURST.
    #[default]
    Burst,
    /// Two consecutive packets of a flow, regardless of direction.
    Adjacent,
}

/// A candidate positive pair before negative sampling.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairUnit {
    pub origin: String,
    pub a: Vec<u8>,
    pub b: Vec<u8>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairStats {
    pub bursts: usize,
    pub eligible: usize,
    pub dropped_short: usize,
}

/// Splits every BURST with at least 4 bytes into a half pair.
pub fn burst_units(bursts: &[Burst<'_>]) -> (Vec<PairUnit>, PairStats) {
    let mut stats = PairStats {
        bursts: bursts.len(),
        ..Default::default()
    };
    let mut units = Vec::new();
    for burst in bursts {
        let bytes = burst_bytes(burst);
        match split_half(&bytes) {
            Ok((a, b)) => units.push(PairUnit {
                origin: burst.label(),
                a: a.to_vec(),
                b: b.to_vec(),
            }),
            Err(_) => stats.dropped_short += 1,
        }
    }
    stats.eligible = units.len();
    (units, stats)
}

/// Adjacent-packet units: consecutive packets whose datagrams are both at
/// least 2 bytes long.
pub fn adjacent_units(flows: &[Flow]) -> (Vec<PairUnit>, PairStats) {
    let mut stats = PairStats::default();
    let mut units = Vec::new();
    for flow in flows {
        for (i, w) in flow.packets.windows(2).enumerate() {
            stats.bursts += 1;
            let (a, b) = (&w[0].packet.datagram, &w[1].packet.datagram);
            if a.len() < 2 || b.len() < 2 {
                stats.dropped_short += 1;
                continue;
            }
            units.push(PairUnit {
                origin: format!("f{}p{}", flow.id.0, i),
                a: a.clone(),
                b: b.clone(),
            });
        }
    }
    stats.eligible = units.len();
    (units, stats)
}

/// One record per unit: half the time the true second segment (label 0),
/// otherwise the second segment of a uniformly chosen different unit.
pub fn pair_units(units: &[PairUnit], rng: &mut Rng) -> Result<Vec<PretrainRecord>, CorpusError> {
    if units.len() < 2 {
        return Err(CorpusError::InsufficientBursts(units.len()));
    }
    let encode = |b: &[u8]| encode_bytes(b).expect("units hold at least 2 bytes per segment");
    let mut out = Vec::with_capacity(units.len());
    for (i, unit) in units.iter().enumerate() {
        let (b, label) = if rng.random_bool(0.5) {
            (&unit.b, 0)
        } else {
            let mut j = rng.random_range(0..units.len() - 1);
            if j >= i {
                j += 1;
            }
            (&units[j].b, 1)
        };
        out.push(PretrainRecord {
            tokens_a: encode(&unit.a),
            tokens_b: encode(b),
            sbp_label: label,
            origin: unit.origin.clone(),
        });
    }
    Ok(out)
}

/// Builds same-origin BURST pair records.
pub fn make_pairs(bursts: &[Burst<'_>], rng: &mut Rng) -> Result<Vec<PretrainRecord>, CorpusError> {
    let (units, _) = burst_units(bursts);
    pair_units(&units, rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskKind {
    Mask,
    Random,
    Keep,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskingConfig {
    pub select_prob: f64,
    pub mask_prob: f64,
    pub random_prob: f64,
    /// Random replacements are drawn from bi-gram ids `4..vocab_size`.
    pub vocab_size: usize,
}

impl MaskingConfig {
    pub fn standard(vocab_size: usize) -> Self {
        MaskingConfig {
            select_prob: 0.15,
            mask_prob: 0.8,
            random_prob: 0.1,
            vocab_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedExample {
    pub input: TokenSequence,
    pub mask_positions: Vec<usize>,
    pub mask_targets: Vec<TokenId>,
    pub mask_kinds: Vec<MaskKind>,
    pub sbp_label: u8,
}

/// Applies masked-BURST-model corruption to the content tokens of `seq`.
///
/// Each content token is selected independently; selected tokens become
/// MASK, a random bi-gram, or stay unchanged. At least one token is always
/// selected.
pub fn apply_mask(
    seq: &TokenSequence,
    sbp_label: u8,
    cfg: &MaskingConfig,
    rng: &mut Rng,
) -> Result<MaskedExample, CorpusError> {
    let content = seq.content_positions();
    if content.is_empty() {
        return Err(CorpusError::NothingToMask);
    }
    let mut positions: Vec<usize> = content
        .iter()
        .copied()
        .filter(|_| rng.random_bool(cfg.select_prob))
        .collect();
    if positions.is_empty() {
        positions.push(content[rng.random_range(0..content.len())]);
    }
    let mut input = seq.clone();
    let mut targets = Vec::with_capacity(positions.len());
    let mut kinds = Vec::with_capacity(positions.len());
    for &p in &positions {
        targets.push(seq.ids[p]);
        let r: f64 = rng.random();
        let kind = if r < cfg.mask_prob {
            input.ids[p] = TokenId::MASK;
            MaskKind::Mask
        } else if r < cfg.mask_prob + cfg.random_prob {
            input.ids[p] = TokenId(rng.random_range(SPECIAL_COUNT..cfg.vocab_size as u32));
            MaskKind::Random
        } else {
            MaskKind::Keep
        };
        kinds.push(kind);
    }
    Ok(MaskedExample {
        input,
        mask_positions: positions,
        mask_targets: targets,
        mask_kinds: kinds,
        sbp_label,
    })
}

pub fn write_corpus(records: &[PretrainRecord], path: impl AsRef<Path>) -> Result<(), CorpusError> {
    crate::io::write_atomic(path.as_ref(), |w| {
        for r in records {
            serde_json::to_writer(&mut *w, r).map_err(std::io::Error::other)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    })?;
    Ok(())
}

pub fn read_corpus(path: impl AsRef<Path>) -> Result<Vec<PretrainRecord>, CorpusError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PretrainRecord = serde_json::from_str(&line).map_err(|e| CorpusError::MalformedRecord {
            line: lineno,
            reason: e.to_string(),
        })?;
        let bad = |reason: &str| CorpusError::MalformedRecord {
            line: lineno,
            reason: reason.to_string(),
        };
        if rec.sbp_label > 1 {
            return Err(bad("sbp_label must be 0 or 1"));
        }
        if rec.tokens_a.is_empty() || rec.tokens_b.is_empty() {
            return Err(bad("empty token segment"));
        }
        if rec.tokens_a.iter().chain(&rec.tokens_b).any(|t| t.is_special()) {
            return Err(bad("special token inside a segment"));
        }
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::token::build_pair_sequence;
    use rand::SeedableRng;

    fn unit(i: usize) -> PairUnit {
        PairUnit {
            origin: format!("u{i}"),
            a: vec![i as u8, 1, 2],
            b: vec![i as u8, 3, 4],
        }
    }

    #[test]
    fn pairs_need_a_negative_pool() {
        let mut rng = Rng::seed_from_u64(1);
        assert!(matches!(
            pair_units(&[unit(0)], &mut rng),
            Err(CorpusError::InsufficientBursts(1))
        ));
        let recs = pair_units(&[unit(0), unit(1)], &mut rng).unwrap();
        assert_eq!(recs.len(), 2);
    }

    #[test]
    fn negatives_never_reuse_own_half() {
        let units: Vec<_> = (0..50).map(unit).collect();
        let mut rng = Rng::seed_from_u64(9);
        for (i, r) in pair_units(&units, &mut rng).unwrap().iter().enumerate() {
            let own = encode_bytes(&units[i].b).unwrap();
            assert_eq!(r.sbp_label == 0, r.tokens_b == own);
        }
    }

    #[test]
    fn single_content_token_is_always_masked() {
        let seq = crate::token::build_single_sequence(&[TokenId(10)], 8).unwrap();
        for s in 0..20 {
            let ex = apply_mask(&seq, 0, &MaskingConfig::standard(100), &mut Rng::seed_from_u64(s)).unwrap();
            assert_eq!(ex.mask_positions, vec![1]);
            assert_eq!(ex.mask_targets, vec![TokenId(10)]);
        }
    }

    #[test]
    fn masking_is_deterministic_and_leaves_specials() {
        let a: Vec<TokenId> = (10..60).map(TokenId).collect();
        let seq = build_pair_sequence(&a, &a, 128).unwrap();
        let cfg = MaskingConfig::standard(1000);
        let x = apply_mask(&seq, 1, &cfg, &mut Rng::seed_from_u64(3)).unwrap();
        let y = apply_mask(&seq, 1, &cfg, &mut Rng::seed_from_u64(3)).unwrap();
        assert_eq!(x, y);
        for p in 0..seq.max_len() {
            if !seq.is_content(p) {
                assert_eq!(x.input.ids[p], seq.ids[p]);
            }
        }
        let mut restored = x.input.clone();
        for (&p, &t) in x.mask_positions.iter().zip(&x.mask_targets) {
            restored.ids[p] = t;
        }
        assert_eq!(restored, seq);
    }

    #[test]
    fn corpus_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let units: Vec<_> = (0..100).map(unit).collect();
        let recs = pair_units(&units, &mut Rng::seed_from_u64(5)).unwrap();
        write_corpus(&recs, &path).unwrap();
        assert_eq!(read_corpus(&path).unwrap(), recs);

        std::fs::write(&path, "").unwrap();
        assert!(read_corpus(&path).unwrap().is_empty());

        std::fs::write(
            &path,
            "{\"tokens_a\":[5],\"tokens_b\":[6],\"sbp_label\":0,\"origin\":\"x\"}\n{\"tokens_a\":[5],\"tokens_b\":[6],\"origin\":\"x\"}\n",
        )
        .unwrap();
        assert!(matches!(
            read_corpus(&path),
            Err(CorpusError::MalformedRecord { line: 2, .. })
        ));
    }
}
