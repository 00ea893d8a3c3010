mod support {
    pub mod gradcheck;
}

use support::gradcheck;

#[test]
fn analytic_gradients_match_finite_differences() {
    for (kind, err) in gradcheck::all() {
        println!("{kind:>24}: max relative error {err:.3e}");
        assert!(err < 1e-5, "{kind}: relative error {err:e}");
    }
}
