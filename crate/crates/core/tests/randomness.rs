mod common;

use common::calibration_p_values;
use etbert_core::randomness::{
    approximate_entropy, block_frequency, cumulative_sums, ks_uniform, longest_run, monobit, run_tests, runs, serial,
    BitSequence, Direction, SuiteParams, TEST_NAMES,
};

#[test]
fn p_values_are_uniform_on_random_input() {
    for (name, ps) in calibration_p_values(2024) {
        assert!(ps.iter().all(|p| (0.0..=1.0).contains(p)));
        let ks = ks_uniform(&ps).unwrap();
        println!("{name:<20} D={:.4} p={:.4}", ks.statistic, ks.p_value);
        assert!(ks.p_value >= 0.01, "{name}: {ks:?}");
    }
}

#[test]
fn degenerate_input_fails_every_test() {
    for bit in [0u8, 1] {
        let seq = BitSequence::from_bits(vec![bit; 10_000]).unwrap();
        for (name, r) in run_tests(&seq, &TEST_NAMES, SuiteParams::default()).unwrap() {
            let p = r.unwrap().p_value;
            assert!(p < 1e-6, "{name} on constant {bit}: {p}");
        }
    }
}

// Reference values from an independent implementation (SciPy's erfc,
// gammaincc and normal CDF) on a fixed 1,000-bit sequence.
#[test]
fn matches_reference_implementation() {
    let seq = BitSequence::parse(include_str!("fixtures/bits1000.txt")).unwrap();
    let close = |got: f64, want: f64| assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    close(monobit(&seq).p_value, 0.8993431885613663);
    close(block_frequency(&seq, 128).unwrap().p_value, 0.1036843454019513);
    close(runs(&seq).p_value, 0.899742090180606);
    close(longest_run(&seq).unwrap().p_value, 0.7336377715128524);
    close(cumulative_sums(&seq, Direction::Forward).p_value, 0.2580720670855075);
    close(cumulative_sums(&seq, Direction::Backward).p_value, 0.3281472083736263);
    close(approximate_entropy(&seq, 2).unwrap().p_value, 0.8445173435533266);
    let s = serial(&seq, 2).unwrap();
    close(s.p_value, 0.9841273200553218);
    close(s.p_value2.unwrap(), 0.8993431885618386);
}
