#![allow(dead_code)]

use etbert_core::corpus::{MaskKind, MaskedExample};
use etbert_core::model::{Encoder, Gradients, HeadConfig, ModelConfig, Objectives};
use etbert_core::randomness::{run_tests, BitSequence, SuiteParams, TEST_NAMES};
use etbert_core::token::{build_pair_sequence, build_single_sequence, TokenId, TokenSequence};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Step and magnitude floor of the reference check.
pub const STEP: f64 = 1e-3;
pub const FLOOR: f64 = 1e-4;

/// Small-vocabulary desk model used by the gradient checks.
pub fn gradcheck_config() -> ModelConfig {
    ModelConfig {
        layers: 2,
        hidden: 64,
        heads: 2,
        ffn_dim: 256,
        vocab_size: 64,
        max_positions: 32,
        dropout: 0.0,
        seed: 11,
        tie_mbm_weights: false,
    }
}

fn random_ids(rng: &mut ChaCha8Rng, n: usize, vocab: u32) -> Vec<TokenId> {
    (0..n).map(|_| TokenId(rng.random_range(4..vocab))).collect()
}

pub fn masked_batch(vocab: u32, seed: u64) -> Vec<MaskedExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..2)
        .map(|i| {
            let a = random_ids(&mut rng, 5 + i, vocab);
            let b = random_ids(&mut rng, 4, vocab);
            let seq = build_pair_sequence(&a, &b, 16).unwrap();
            let mut input = seq.clone();
            let positions = vec![2, 4, 9];
            let targets = positions.iter().map(|&p| seq.ids[p]).collect();
            input.ids[2] = TokenId::MASK;
            input.ids[9] = TokenId(rng.random_range(4..vocab));
            MaskedExample {
                input,
                mask_positions: positions,
                mask_targets: targets,
                mask_kinds: vec![MaskKind::Mask, MaskKind::Keep, MaskKind::Random],
                sbp_label: i as u8,
            }
        })
        .collect()
}

pub fn class_batch(vocab: u32, seed: u64, segments: usize) -> Vec<(Vec<TokenSequence>, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..3)
        .map(|i| {
            let units = (0..segments)
                .map(|_| build_single_sequence(&random_ids(&mut rng, 6, vocab), 12).unwrap())
                .collect();
            (units, i % 3)
        })
        .collect()
}

#[derive(Debug)]
pub struct CheckReport {
    pub coords: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

/// `|a - n| / max(|a|, |n|, floor)`. The floor keeps the O(h^2) truncation
/// error of the difference quotient from swamping near-zero gradients.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    if denom == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / denom
    }
}

/// Compares analytic gradients against central differences with step `h`
/// at `per_tensor` random coordinates of every parameter tensor.
pub fn check<L>(
    model: &Encoder<f64>,
    grads: &Gradients<f64>,
    loss: L,
    per_tensor: usize,
    h: f64,
    floor: f64,
    seed: u64,
) -> CheckReport
where
    L: Fn(&Encoder<f64>) -> f64,
{
    let live_floor = 1e-7;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = model.clone();
    let mut report = CheckReport {
        coords: 0,
        max_rel_err: 0.0,
        worst: String::new(),
    };
    for i in 0..model.params().len() {
        let g = grads.by_index(i);
        let n = g.len();
        // Prefer coordinates with non-zero gradient so unused embedding rows
        // do not dominate the sample.
        let live: Vec<usize> = g.iter().enumerate().filter(|(_, v)| v.abs() > live_floor).map(|(j, _)| j).collect();
        let pool: Vec<usize> = if live.is_empty() { (0..n).collect() } else { live };
        for _ in 0..per_tensor {
            let j = pool[rng.random_range(0..pool.len())];
            let orig = {
                let p = probe.params_mut().iter_mut().nth(i).unwrap();
                let v = p.value.as_slice_mut().unwrap();
                let o = v[j];
                v[j] = o + h;
                o
            };
            let up = loss(&probe);
            set(&mut probe, i, j, orig - h);
            let down = loss(&probe);
            set(&mut probe, i, j, orig);
            let numeric = (up - down) / (2.0 * h);
            let analytic = g.as_slice().unwrap()[j];
            report.coords += 1;
            let e = rel_err(analytic, numeric, floor);
            if e > report.max_rel_err {
                report.max_rel_err = e;
                let name = &model.params().iter().nth(i).unwrap().name;
                report.worst = format!("{name}[{j}]: analytic {analytic:e} numeric {numeric:e}");
            }
        }
    }
    report
}

fn set(model: &mut Encoder<f64>, i: usize, j: usize, value: f64) {
    model.params_mut().iter_mut().nth(i).unwrap().value.as_slice_mut().unwrap()[j] = value;
}

pub fn pretrain_report(per_tensor: usize, h: f64, floor: f64) -> CheckReport {
    pretrain_report_for(gradcheck_config(), per_tensor, h, floor)
}

pub fn pretrain_report_for(cfg: ModelConfig, per_tensor: usize, h: f64, floor: f64) -> CheckReport {
    let model: Encoder<f64> = Encoder::<f32>::new(cfg.clone()).unwrap().cast();
    let batch = masked_batch(cfg.vocab_size as u32, 5);
    let obj = Objectives::default();
    let (_, grads) = model.pretrain_loss_and_grads(&batch, obj, None, 1.0).unwrap();
    check(&model, &grads, |m| m.pretrain_loss(&batch, obj).unwrap().total, per_tensor, h, floor, 17)
}

pub fn classifier_report(per_tensor: usize, segments: usize) -> CheckReport {
    let cfg = gradcheck_config();
    let model: Encoder<f64> = Encoder::<f32>::new(cfg.clone())
        .unwrap()
        .with_classifier(HeadConfig {
            num_classes: 3,
            segments,
        })
        .unwrap()
        .cast();
    let batch = class_batch(cfg.vocab_size as u32, 9, segments);
    let refs: Vec<(&[TokenSequence], usize)> = batch.iter().map(|(u, l)| (u.as_slice(), *l)).collect();
    let (_, grads) = model.classification_loss_and_grads(&refs, 0.0, None, 1.0).unwrap();
    check(&model, &grads, |m| m.classification_loss(&refs).unwrap(), per_tensor, STEP, FLOOR, 23)
}

/// p-values for every test on 1,000 uniform 10,000-bit sequences.
pub fn calibration_p_values(seed: u64) -> Vec<(String, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut columns: Vec<(String, Vec<f64>)> = Vec::new();
    for _ in 0..1000 {
        let bits: Vec<u8> = (0..10_000).map(|_| rng.random_range(0..2u8)).collect();
        let seq = BitSequence::from_bits(bits).unwrap();
        for (name, r) in run_tests(&seq, &TEST_NAMES, SuiteParams::default()).unwrap() {
            let p = r.unwrap().p_value;
            match columns.iter_mut().find(|(n, _)| *n == name) {
                Some((_, v)) => v.push(p),
                None => columns.push((name, vec![p])),
            }
        }
    }
    columns
}
