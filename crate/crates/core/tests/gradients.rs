mod common;

use common::{gradient_relative_error, LossKind, TinySiamese};

const LAMBDAS: [f64; 4] = [0.31, 0.77, 0.52, 0.18];

fn check(kind: LossKind) {
    let net = TinySiamese::new(11);
    assert!(net.store.scalar_count() <= 1000);
    let batch = TinySiamese::batch(5, 6);
    let err = gradient_relative_error(&net, &batch, kind, LAMBDAS);
    assert!(err < 1e-4, "{kind:?}: relative error {err:e}");
}

#[test]
fn contrastive_matches_finite_differences() {
    check(LossKind::Contrastive);
}

#[test]
fn delta_matches_finite_differences() {
    check(LossKind::Delta);
}

#[test]
fn sl_regression_matches_finite_differences() {
    check(LossKind::SlRegression);
}

#[test]
fn weighted_cumulative_matches_finite_differences() {
    check(LossKind::Cumulative);
}
