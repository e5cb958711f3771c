mod common;

#[test]
fn backprop_matches_central_differences() {
    for (name, err) in common::gradient_suite() {
        assert!(err <= 1e-4, "{name}: relative error {err:.3e}");
    }
}
