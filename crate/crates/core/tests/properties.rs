mod common;

use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn gamma_gradients_match_central_differences(seed in any::<u64>()) {
        prop_assert!(common::gradient_matches_fd(seed).map_err(TestCaseError::fail)? < 1e-5);
    }

    #[test]
    fn rig_jacobians_match_finite_differences(seed in any::<u64>()) {
        prop_assert!(common::rig_jacobians_match_fd(seed).map_err(TestCaseError::fail)? < 1e-5);
    }

    #[test]
    fn secant_update_satisfies_secant_equation(seed in any::<u64>()) {
        prop_assert!(common::secant_equation_exact(seed).map_err(TestCaseError::fail)? <= 1e-12);
    }

    #[test]
    fn eval_inverts_track(seed in any::<u64>()) {
        prop_assert!(common::eval_after_track_is_identity(seed).map_err(TestCaseError::fail)? <= 1e-10);
    }

    #[test]
    fn augmentation_is_heaviside(seed in any::<u64>()) {
        common::augment_is_heaviside(seed).map_err(TestCaseError::fail)?;
    }
}
