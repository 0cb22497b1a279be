#[path = "properties/mod.rs"]
mod properties;
mod reference;

use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn delta_kam_is_identity(case in properties::delta_strategy()) {
        properties::delta_identity(case)?;
    }

    #[test]
    fn decoding_is_translation_equivariant(case in properties::decode_strategy()) {
        properties::decode_equivariance(case)?;
    }

    #[test]
    fn kem_stride_is_sigma_ratio(case in properties::kem_strategy()) {
        properties::kem_stride(case)?;
    }

    #[test]
    fn oks_is_translation_invariant(case in properties::oks_strategy()) {
        properties::oks_translation(case)?;
    }

    #[test]
    fn perfect_predictions_score_ap_one(case in properties::ap_strategy()) {
        properties::ap_perfect(case)?;
    }
}
