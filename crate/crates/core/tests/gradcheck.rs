mod common;

use common::{op_gradient_errors, ChainCase};

#[test]
fn every_op_matches_central_differences() {
    for seed in 0..20 {
        for (op, err) in op_gradient_errors(seed) {
            assert!(err < 1e-4, "{op} seed {seed}: relative error {err:e}");
        }
    }
}

#[test]
fn full_objective_through_network_matches_central_differences() {
    for seed in 0..20 {
        let case = ChainCase::random(seed);
        for (t, err) in case.errors().into_iter().enumerate() {
            assert!(err < 1e-4, "seed {seed} parameter tensor {t}: relative error {err:e}");
        }
    }
}
