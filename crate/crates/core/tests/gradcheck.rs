mod common;

use common::{model_gradcheck, op_cases, op_gradcheck};

#[test]
fn every_primitive_matches_central_differences() {
    for case in op_cases() {
        let err = op_gradcheck(&case, 20);
        assert!(err < 1e-6, "{}: rel err {err:e}", case.name);
    }
}

#[test]
fn two_layer_model_matches_central_differences() {
    for seed in 0..20 {
        let err = model_gradcheck(seed, 40);
        assert!(err < 1e-4, "instance {seed}: rel err {err:e}");
    }
}
