mod common;

#[test]
fn analytic_gradients_match_central_differences() {
    let ((err, at), _) = common::gradient_suite(0, 10, 12, 1e-5);
    assert!(err < 1e-4, "relative error {err:e} at {at}");
}

#[test]
fn gradients_match_on_full_size_images() {
    let ((err, at), _) = common::gradient_suite(100, 1, 32, 1e-5);
    assert!(err < 1e-4, "relative error {err:e} at {at}");
}
