//! Statistical randomness tests over payload bits (a subset of the NIST
//! SP 800-22 battery) plus a Kolmogorov-Smirnov uniformity check used to
//! calibrate them.

pub mod special;

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use special::{erfc, igamc, kolmogorov_q, normal_cdf};

#[derive(Debug, Clone, thiserror::Error, PartialEq, Eq)]
pub enum RandomnessError {
    #[error("no input bytes")]
    EmptyInput,
    #[error("block length {m} exceeds sequence length {n}")]
    BlockTooLong { m: usize, n: usize },
    #[error("sequence of {n} bits is shorter than the required {needed}")]
    SequenceTooShort { n: usize, needed: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitSequence {
    bits: Vec<u8>,
}

impl BitSequence {
    /// Expands bytes most-significant bit first.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, RandomnessError> {
        if bytes.is_empty() {
            return Err(RandomnessError::EmptyInput);
        }
        let bits = bytes.iter().flat_map(|&b| (0..8).rev().map(move |i| (b >> i) & 1)).collect();
        Ok(BitSequence { bits })
    }

    pub fn from_bits(bits: Vec<u8>) -> Result<Self, RandomnessError> {
        if bits.is_empty() {
            return Err(RandomnessError::EmptyInput);
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(RandomnessError::InvalidParameter("bits must be 0 or 1".into()));
        }
        Ok(BitSequence { bits })
    }

    /// Parses a string of `0`/`1` characters; whitespace is ignored.
    pub fn parse(s: &str) -> Result<Self, RandomnessError> {
        let bits = s
            .chars()
            .filter(|c| !c.is_whitespace())
            .map(|c| match c {
                '0' => Ok(0),
                '1' => Ok(1),
                _ => Err(RandomnessError::InvalidParameter(format!("unexpected character {c:?}"))),
            })
            .collect::<Result<Vec<u8>, _>>()?;
        Self::from_bits(bits)
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    fn ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }
}

/// Concatenates datagrams and expands them MSB-first.
pub fn bits_from_datagrams<'a>(datagrams: impl IntoIterator<Item = &'a [u8]>) -> Result<BitSequence, RandomnessError> {
    let bytes: Vec<u8> = datagrams.into_iter().flatten().copied().collect();
    BitSequence::from_bytes(&bytes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub test: String,
    pub p_value: f64,
    pub statistic: f64,
    pub n_used: usize,
    /// Second p-value of the serial test.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub p_value2: Option<f64>,
    #[serde(default)]
    pub prerequisite_failed: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub warning: Option<String>,
}

impl TestResult {
    fn new(test: &str, p_value: f64, statistic: f64, n_used: usize) -> Self {
        TestResult {
            test: test.to_string(),
            p_value: p_value.clamp(0.0, 1.0),
            statistic,
            n_used,
            p_value2: None,
            prerequisite_failed: false,
            warning: None,
        }
    }

    fn warn_below(mut self, n: usize, min: usize) -> Self {
        if n < min {
            let msg = format!("{} on {n} bits; at least {min} recommended", self.test);
            log::warn!("{msg}");
            self.warning = Some(msg);
        }
        self
    }
}

pub fn monobit(seq: &BitSequence) -> TestResult {
    let n = seq.len();
    let s = 2 * seq.ones() as i64 - n as i64;
    let s_obs = (s.unsigned_abs() as f64) / (n as f64).sqrt();
    TestResult::new("monobit", erfc(s_obs / std::f64::consts::SQRT_2), s_obs, n).warn_below(n, 100)
}

pub fn block_frequency(seq: &BitSequence, m: usize) -> Result<TestResult, RandomnessError> {
    let n = seq.len();
    if m == 0 {
        return Err(RandomnessError::InvalidParameter("block length must be positive".into()));
    }
    if m > n {
        return Err(RandomnessError::BlockTooLong { m, n });
    }
    let blocks = n / m;
    let chi2 = 4.0
        * m as f64
        * seq.bits[..blocks * m]
            .chunks(m)
            .map(|b| {
                let pi = b.iter().map(|&x| x as f64).sum::<f64>() / m as f64;
                (pi - 0.5) * (pi - 0.5)
            })
            .sum::<f64>();
    let p = igamc(blocks as f64 / 2.0, chi2 / 2.0);
    Ok(TestResult::new("block_frequency", p, chi2, blocks * m).warn_below(n, 100))
}

pub fn runs(seq: &BitSequence) -> TestResult {
    let n = seq.len();
    let nf = n as f64;
    let pi = seq.ones() as f64 / nf;
    if (pi - 0.5).abs() >= 2.0 / nf.sqrt() {
        let mut r = TestResult::new("runs", 0.0, 0.0, n);
        r.prerequisite_failed = true;
        return r.warn_below(n, 100);
    }
    let v = 1 + seq.bits.windows(2).filter(|w| w[0] != w[1]).count();
    let q = pi * (1.0 - pi);
    let p = erfc((v as f64 - 2.0 * nf * q).abs() / (2.0 * (2.0 * nf).sqrt() * q));
    TestResult::new("runs", p, v as f64, n).warn_below(n, 100)
}

/// Block size, category bounds and class probabilities of the longest-run test.
fn longest_run_table(n: usize) -> (usize, usize, &'static [f64]) {
    const P8: [f64; 4] = [0.2148, 0.3672, 0.2305, 0.1875];
    const P128: [f64; 6] = [0.1174, 0.2430, 0.2493, 0.1752, 0.1027, 0.1124];
    const P10K: [f64; 7] = [0.0882, 0.2092, 0.2483, 0.1933, 0.1208, 0.0675, 0.0727];
    if n < 6272 {
        (8, 1, &P8)
    } else if n < 750_000 {
        (128, 4, &P128)
    } else {
        (10_000, 10, &P10K)
    }
}

pub fn longest_run(seq: &BitSequence) -> Result<TestResult, RandomnessError> {
    let n = seq.len();
    if n < 128 {
        return Err(RandomnessError::SequenceTooShort { n, needed: 128 });
    }
    let (m, low, probs) = longest_run_table(n);
    let k = probs.len() - 1;
    let blocks = n / m;
    let mut nu = vec![0usize; probs.len()];
    for block in seq.bits[..blocks * m].chunks(m) {
        let (mut best, mut cur) = (0usize, 0usize);
        for &b in block {
            cur = if b == 1 { cur + 1 } else { 0 };
            best = best.max(cur);
        }
        nu[best.clamp(low, low + k) - low] += 1;
    }
    let nb = blocks as f64;
    let chi2: f64 = nu
        .iter()
        .zip(probs)
        .map(|(&v, &p)| (v as f64 - nb * p).powi(2) / (nb * p))
        .sum();
    Ok(TestResult::new("longest_run", igamc(k as f64 / 2.0, chi2 / 2.0), chi2, blocks * m))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Forward,
    Backward,
}

pub fn cumulative_sums(seq: &BitSequence, dir: Direction) -> TestResult {
    let n = seq.len();
    let step = |b: &u8| if *b == 1 { 1i64 } else { -1 };
    let mut s = 0i64;
    let mut z = 0i64;
    let mut walk = |b: &u8| {
        s += step(b);
        z = z.max(s.abs());
    };
    match dir {
        Direction::Forward => seq.bits.iter().for_each(&mut walk),
        Direction::Backward => seq.bits.iter().rev().for_each(&mut walk),
    }
    let (nf, zf) = (n as f64, z as f64);
    let sq = nf.sqrt();
    let mut sum1 = 0.0;
    let mut k = ((-nf / zf + 1.0) / 4.0).trunc();
    while k <= (nf / zf - 1.0) / 4.0 {
        sum1 += normal_cdf((4.0 * k + 1.0) * zf / sq) - normal_cdf((4.0 * k - 1.0) * zf / sq);
        k += 1.0;
    }
    let mut sum2 = 0.0;
    let mut k = ((-nf / zf - 3.0) / 4.0).trunc();
    while k <= (nf / zf - 1.0) / 4.0 {
        sum2 += normal_cdf((4.0 * k + 3.0) * zf / sq) - normal_cdf((4.0 * k + 1.0) * zf / sq);
        k += 1.0;
    }
    let name = match dir {
        Direction::Forward => "cusum_forward",
        Direction::Backward => "cusum_backward",
    };
    TestResult::new(name, 1.0 - sum1 + sum2, zf, n).warn_below(n, 100)
}

/// Frequencies of every overlapping `m`-bit pattern, wrapping around the end.
fn circular_counts(bits: &[u8], m: usize) -> HashMap<u64, usize> {
    let n = bits.len();
    let mut counts = HashMap::new();
    if m == 0 {
        return counts;
    }
    let mut key = 0u64;
    let mask = if m >= 64 { u64::MAX } else { (1u64 << m) - 1 };
    for i in 0..n + m - 1 {
        key = ((key << 1) | bits[i % n] as u64) & mask;
        if i + 1 >= m {
            *counts.entry(key).or_insert(0) += 1;
        }
    }
    counts
}

fn phi(bits: &[u8], m: usize) -> f64 {
    let n = bits.len() as f64;
    circular_counts(bits, m)
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            p * p.ln()
        })
        .sum()
}

pub fn approximate_entropy(seq: &BitSequence, m: usize) -> Result<TestResult, RandomnessError> {
    let n = seq.len();
    if m == 0 || m + 1 > n {
        return Err(RandomnessError::InvalidParameter(format!("pattern length {m} for {n} bits")));
    }
    let apen = phi(&seq.bits, m) - phi(&seq.bits, m + 1);
    let chi2 = 2.0 * n as f64 * (std::f64::consts::LN_2 - apen);
    let p = igamc(2f64.powi(m as i32 - 1), chi2 / 2.0);
    let mut r = TestResult::new("approximate_entropy", p, chi2, n);
    if (m as f64) >= (n as f64).log2().floor() - 5.0 {
        let msg = format!("approximate_entropy: m={m} is large for {n} bits");
        log::warn!("{msg}");
        r.warning = Some(msg);
    }
    Ok(r)
}

fn psi_sq(bits: &[u8], m: usize) -> f64 {
    if m == 0 {
        return 0.0;
    }
    let n = bits.len() as f64;
    let sum: f64 = circular_counts(bits, m).values().map(|&c| (c * c) as f64).sum();
    2f64.powi(m as i32) / n * sum - n
}

pub fn serial(seq: &BitSequence, m: usize) -> Result<TestResult, RandomnessError> {
    let n = seq.len();
    if m < 2 || m > n {
        return Err(RandomnessError::InvalidParameter(format!("serial pattern length {m} for {n} bits")));
    }
    let (p0, p1, p2) = (psi_sq(&seq.bits, m), psi_sq(&seq.bits, m - 1), psi_sq(&seq.bits, m - 2));
    let d1 = p0 - p1;
    let d2 = p0 - 2.0 * p1 + p2;
    let mut r = TestResult::new("serial", igamc(2f64.powi(m as i32 - 2), d1 / 2.0), d1, n);
    r.p_value2 = Some(igamc(2f64.powi(m as i32 - 3), d2 / 2.0).clamp(0.0, 1.0));
    Ok(r)
}

/// Names accepted by [`run_tests`].
pub const TEST_NAMES: [&str; 7] = [
    "monobit",
    "block_frequency",
    "runs",
    "longest_run",
    "cusum",
    "approximate_entropy",
    "serial",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuiteParams {
    pub block_len: usize,
    pub apen_m: usize,
    pub serial_m: usize,
}

impl Default for SuiteParams {
    fn default() -> Self {
        SuiteParams {
            block_len: 128,
            apen_m: 2,
            serial_m: 2,
        }
    }
}

/// Runs the selected tests. A test whose preconditions fail is reported as
/// an error string in place of its result so the others still run.
pub fn run_tests(
    seq: &BitSequence,
    names: &[&str],
    params: SuiteParams,
) -> Result<Vec<(String, Result<TestResult, RandomnessError>)>, RandomnessError> {
    let mut out = Vec::new();
    for &name in names {
        match name {
            "monobit" => out.push((name.to_string(), Ok(monobit(seq)))),
            "block_frequency" => out.push((name.to_string(), block_frequency(seq, params.block_len))),
            "runs" => out.push((name.to_string(), Ok(runs(seq)))),
            "longest_run" => out.push((name.to_string(), longest_run(seq))),
            "cusum" => {
                out.push(("cusum_forward".into(), Ok(cumulative_sums(seq, Direction::Forward))));
                out.push(("cusum_backward".into(), Ok(cumulative_sums(seq, Direction::Backward))));
            }
            "approximate_entropy" => out.push((name.to_string(), approximate_entropy(seq, params.apen_m))),
            "serial" => {
                let r = serial(seq, params.serial_m);
                let second = r.clone().map(|mut t| {
                    t.test = "serial_2".into();
                    t.p_value = t.p_value2.unwrap_or(0.0);
                    t
                });
                out.push(("serial_1".into(), r));
                out.push(("serial_2".into(), second));
            }
            other => return Err(RandomnessError::InvalidParameter(format!("unknown test {other:?}"))),
        }
    }
    Ok(out)
}

/// p-value table: rows are tests, columns are input groups.
pub fn render_table(groups: &[(String, Vec<(String, Result<TestResult, RandomnessError>)>)]) -> String {
    let mut rows: Vec<String> = Vec::new();
    for (_, results) in groups {
        for (name, _) in results {
            if !rows.contains(name) {
                rows.push(name.clone());
            }
        }
    }
    let w0 = rows.iter().map(|r| r.len()).max().unwrap_or(4).max(4);
    let widths: Vec<usize> = groups.iter().map(|(g, _)| g.len().max(8)).collect();
    let mut out = String::new();
    let _ = write!(out, "{:<w0$}", "test");
    for ((g, _), w) in groups.iter().zip(&widths) {
        let _ = write!(out, "  {g:>w$}");
    }
    out.push('\n');
    for row in &rows {
        let _ = write!(out, "{row:<w0$}");
        for ((_, results), w) in groups.iter().zip(&widths) {
            let cell = match results.iter().find(|(n, _)| n == row) {
                Some((_, Ok(r))) => format!("{:.6}", r.p_value),
                Some((_, Err(_))) => "n/a".to_string(),
                None => "-".to_string(),
            };
            let _ = write!(out, "  {cell:>w$}");
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// One-sample Kolmogorov-Smirnov test of `samples` against U(0, 1).
pub fn ks_uniform(samples: &[f64]) -> Result<KsResult, RandomnessError> {
    if samples.is_empty() {
        return Err(RandomnessError::EmptyInput);
    }
    let mut x = samples.to_vec();
    x.sort_by(|a, b| a.total_cmp(b));
    let n = x.len() as f64;
    let d = x
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let v = v.clamp(0.0, 1.0);
            ((i + 1) as f64 / n - v).max(v - i as f64 / n)
        })
        .fold(0.0, f64::max);
    let sn = n.sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    Ok(KsResult {
        statistic: d,
        p_value: kolmogorov_q(lambda),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(s: &str) -> BitSequence {
        BitSequence::parse(s).unwrap()
    }

    #[test]
    fn msb_first_expansion() {
        assert_eq!(BitSequence::from_bytes(&[0xa5]).unwrap().bits(), &[1, 0, 1, 0, 0, 1, 0, 1]);
        let two = bits_from_datagrams([&[0x00u8][..], &[0xff][..]]).unwrap();
        assert_eq!(two.bits(), &[0, 0, 0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 1, 1, 1]);
        assert_eq!(bits_from_datagrams(std::iter::empty()), Err(RandomnessError::EmptyInput));
    }

    #[test]
    fn monobit_examples() {
        assert!((monobit(&seq("1011010101")).p_value - 0.527089).abs() < 1e-6);
        assert!(monobit(&BitSequence::from_bits(vec![0; 100]).unwrap()).p_value < 1e-20);
        assert_eq!(monobit(&seq(&"01".repeat(50))).p_value, 1.0);
    }

    #[test]
    fn block_frequency_examples() {
        assert!((block_frequency(&seq("0110011010"), 3).unwrap().p_value - 0.801252).abs() < 1e-6);
        assert_eq!(block_frequency(&seq(&"01".repeat(50)), 2).unwrap().p_value, 1.0);
        assert_eq!(
            block_frequency(&seq("0101"), 8),
            Err(RandomnessError::BlockTooLong { m: 8, n: 4 })
        );
    }

    #[test]
    fn runs_examples() {
        assert!((runs(&seq("1001101011")).p_value - 0.147232).abs() < 1e-6);
        assert!(runs(&seq(&"01".repeat(50))).p_value < 1e-6);
        let r = runs(&BitSequence::from_bits(vec![1; 100]).unwrap());
        assert!(r.prerequisite_failed && r.p_value == 0.0);
    }

    #[test]
    fn longest_run_examples() {
        assert_eq!(
            longest_run(&BitSequence::from_bits(vec![1; 127]).unwrap()),
            Err(RandomnessError::SequenceTooShort { n: 127, needed: 128 })
        );
        assert!(longest_run(&BitSequence::from_bits(vec![1; 1024]).unwrap()).unwrap().p_value < 1e-6);
    }

    #[test]
    fn cusum_examples() {
        let s = seq("1011010111");
        assert!((cumulative_sums(&s, Direction::Forward).p_value - 0.4116588).abs() < 1e-6);
        let alt = seq(&"10".repeat(5000));
        assert!(cumulative_sums(&alt, Direction::Forward).p_value > 0.999_999);
        assert!(cumulative_sums(&BitSequence::from_bits(vec![1; 1000]).unwrap(), Direction::Forward).p_value < 1e-20);
        let pal = seq("1101001011110100101011");
        let pal: Vec<u8> = pal.bits().iter().chain(pal.bits().iter().rev()).copied().collect();
        let pal = BitSequence::from_bits(pal).unwrap();
        assert_eq!(
            cumulative_sums(&pal, Direction::Forward).p_value,
            cumulative_sums(&pal, Direction::Backward).p_value
        );
    }

    #[test]
    fn approximate_entropy_examples() {
        let r = approximate_entropy(&seq("0100110101"), 3).unwrap();
        assert!((r.p_value - 0.261961).abs() < 1e-6, "{}", r.p_value);
        assert!(approximate_entropy(&BitSequence::from_bits(vec![0; 100]).unwrap(), 2).unwrap().p_value < 1e-6);
    }

    #[test]
    fn serial_examples() {
        let r = serial(&seq("0011011101"), 3).unwrap();
        assert!((r.p_value - 0.808792).abs() < 1e-6);
        assert!((r.p_value2.unwrap() - 0.670320).abs() < 1e-6);
        // Every 2-bit pattern of a de Bruijn cycle appears equally often.
        let u = serial(&seq(&"0011".repeat(25)), 2).unwrap();
        assert_eq!((u.p_value, u.p_value2), (1.0, Some(1.0)));
        let c = serial(&BitSequence::from_bits(vec![0; 128]).unwrap(), 2).unwrap();
        assert!(c.p_value < 1e-6 && c.p_value2.unwrap() < 1e-6);
    }

    #[test]
    fn ks_rejects_skewed_and_accepts_grid() {
        let grid: Vec<f64> = (0..1000).map(|i| (i as f64 + 0.5) / 1000.0).collect();
        assert!(ks_uniform(&grid).unwrap().p_value > 0.99);
        let skew: Vec<f64> = grid.iter().map(|x| x * x).collect();
        assert!(ks_uniform(&skew).unwrap().p_value < 1e-6);
    }

    #[test]
    fn table_has_a_row_per_test() {
        let s = BitSequence::from_bytes(&[0x5a; 200]).unwrap();
        let r = run_tests(&s, &TEST_NAMES, SuiteParams::default()).unwrap();
        let t = render_table(&[("tls".into(), r)]);
        assert_eq!(t.lines().count(), 1 + 9);
        assert!(t.lines().nth(1).unwrap().contains('.'));
    }
}
