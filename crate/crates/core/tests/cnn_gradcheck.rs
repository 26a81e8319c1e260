//! Backpropagated gradients against central finite differences in `f64`.

mod common;

use common::gradcheck::{check, toy};
use mtverify_core::cnn::{DecayScope, LossMode, LossSpec};

fn assert_all_below(report: &[(String, f64)], bound: f64) {
    for (name, err) in report {
        assert!(*err < bound, "{name}: relative error {err:e}");
    }
}

#[test]
fn every_parameter_matches_finite_differences() {
    let (model, x, y) = toy(true, 1);
    let report = check(&model, &x, &y, &LossSpec::standard(0.01));
    // stem, 2 blocks (one with projection), final bn, dense
    assert_eq!(report.len(), 1 + 6 + 7 + 2 + 2);
    assert_all_below(&report, 1e-3);
}

#[test]
fn gradients_hold_without_skips_and_with_deeper_stages() {
    let (model, x, y) = toy(false, 1);
    assert_all_below(&check(&model, &x, &y, &LossSpec::standard(0.0)), 1e-3);
    let (model, x, y) = toy(true, 2);
    assert_all_below(&check(&model, &x, &y, &LossSpec::standard(0.0)), 1e-3);
}

#[test]
fn gradients_follow_every_loss_mode() {
    let (model, x, y) = toy(true, 1);
    for mode in [
        LossMode::MinusWeightDecay,
        LossMode::UnhalvedWeightDecay,
        LossMode::SummedCrossEntropy,
        LossMode::NoWeightDecay,
    ] {
        for scope in [DecayScope::All, DecayScope::Weights] {
            let spec = LossSpec {
                weight_decay: 0.05,
                mode,
                scope,
            };
            assert_all_below(&check(&model, &x, &y, &spec), 1e-3);
        }
    }
}
