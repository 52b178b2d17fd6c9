mod common;

#[test]
fn every_layer_matches_finite_differences() {
    for seed in [1, 2, 3] {
        for (layer, err) in common::layer_gradient_errors(seed) {
            assert!(err < 1e-4, "{layer} (seed {seed}): relative error {err:e}");
        }
    }
}

#[test]
fn end_to_end_backward_matches_finite_differences() {
    for seed in [4, 5] {
        let err = common::end_to_end_gradient_error(seed);
        assert!(err < 1e-3, "seed {seed}: relative error {err:e}");
    }
}

#[test]
fn rel_err_oracle_sanity() {
    assert_eq!(common::rel_err(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
    assert_eq!(common::rel_err(&[0.0], &[0.0]), 0.0);
    assert!((common::rel_err(&[1.0], &[-1.0]) - 1.0).abs() < 1e-15);
}
