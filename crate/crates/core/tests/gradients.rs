mod support;

use support::gradcheck::{check_all, threshold_gradient_magnitude, TOLERANCE};

#[test]
fn every_primitive_matches_finite_differences() {
    for (name, err) in check_all(7) {
        assert!(err <= TOLERANCE, "{name}: relative error {err:e}");
    }
}

#[test]
fn thresholds_receive_no_gradient() {
    assert_eq!(threshold_gradient_magnitude(11), 0.0);
}
