mod common;

use std::time::Instant;

use common::{FLOOR, STEP};
use etbert_core::model::ModelConfig;

#[test]
fn pretraining_gradients_match_central_differences() {
    let start = Instant::now();
    let r = common::pretrain_report(6, STEP, FLOOR);
    println!("{r:?} in {:?}", start.elapsed());
    assert!(r.coords >= 200, "only {} coordinates", r.coords);
    assert!(r.max_rel_err <= 1e-4, "{r:?}");
}

// A smaller step shrinks truncation error enough that near-zero gradients
// agree in the plain relative sense too.
#[test]
fn pretraining_gradients_match_at_small_step() {
    let r = common::pretrain_report(6, 1e-4, 1e-6);
    assert!(r.max_rel_err <= 1e-4, "{r:?}");
}

#[test]
fn tied_output_projection_gradients_match() {
    let cfg = ModelConfig {
        tie_mbm_weights: true,
        ..common::gradcheck_config()
    };
    let r = common::pretrain_report_for(cfg, 6, STEP, FLOOR);
    assert!(r.max_rel_err <= 1e-4, "{r:?}");
}

#[test]
fn classifier_gradients_match_central_differences() {
    let r = common::classifier_report(3, 1);
    assert!(r.max_rel_err <= 1e-4, "{r:?}");
}

#[test]
fn concatenated_classifier_gradients_match_central_differences() {
    let r = common::classifier_report(2, 3);
    assert!(r.max_rel_err <= 1e-4, "{r:?}");
}
