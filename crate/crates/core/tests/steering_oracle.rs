mod common;

use common::{cosine, oracle_direction, random_dump, transformed, COSINE_TOLERANCE};
use proptest::prelude::*;
use steerbench::schema::Emotion;
use steerbench::steering::derive_steering_vector;

#[test]
fn matches_dense_eigendecomposition_on_100_dumps() {
    for seed in 0..100 {
        let dump = random_dump(seed);
        let v = derive_steering_vector(&dump, Emotion::Fear).unwrap();
        let (oracle, ratio) = oracle_direction(&dump, Emotion::Fear);
        let c = cosine(&v.direction, &oracle);
        assert!(c > 1.0 - COSINE_TOLERANCE, "seed {seed}: cosine {c}");
        assert!(
            (v.explained_variance_ratio - ratio).abs() < 1e-6,
            "seed {seed}"
        );
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn invariant_to_translation_scale_and_row_order(seed in 0u64..10_000, shift in -5.0f32..5.0, scale in 0.1f32..10.0) {
        let dump = random_dump(seed);
        let base = derive_steering_vector(&dump, Emotion::Fear).unwrap().direction;
        let shifted = transformed(&dump, |k, x| x + shift * (1.0 + k as f32 * 0.1), None);
        let scaled = transformed(&dump, |_, x| x * scale, None);
        let permuted = transformed(&dump, |_, x| x, Some(seed));
        for (name, t) in [("translation", shifted), ("scale", scaled), ("permutation", permuted)] {
            let v = derive_steering_vector(&t, Emotion::Fear).unwrap().direction;
            let c = cosine(&base, &v);
            prop_assert!(c > 1.0 - COSINE_TOLERANCE, "{} cosine {}", name, c);
        }
    }
}
