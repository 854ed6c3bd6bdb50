use geofm_core::feature_viz::{pca_project_features, render_rgb_map};
use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn features(seed: u64, n: usize, d: usize) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scales: Vec<f64> = (0..d).map(|j| 1.0 + 3.0 / (j + 1) as f64).collect();
    Array2::from_shape_fn((n, d), |(_, j)| rng.random_range(-1.0..1.0) * scales[j])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn shift_invariant(seed in 0u64..100_000, n in 4usize..40, d in 3usize..24, offset in -50.0f64..50.0) {
        let x = features(seed, n, d);
        let shift = Array1::from_shape_fn(d, |j| offset * (j as f64 + 0.5).sin());
        let a = pca_project_features(x.view(), 3).unwrap();
        let b = pca_project_features((&x + &shift).view(), 3).unwrap();
        for (u, v) in a.projected.iter().zip(b.projected.iter()) {
            prop_assert!((u - v).abs() < 1e-7, "{} vs {}", u, v);
        }
    }

    #[test]
    fn orthonormal_and_ordered(seed in 0u64..100_000, n in 4usize..40, d in 3usize..24) {
        let p = pca_project_features(features(seed, n, d).view(), 3).unwrap();
        let gram = p.components.dot(&p.components.t());
        for i in 0..3 {
            for j in 0..3 {
                let target = if i == j { 1.0 } else { 0.0 };
                prop_assert!((gram[[i, j]] - target).abs() < 1e-9);
            }
        }
        prop_assert!(p.explained_variance.windows(2).all(|w| w[0] >= w[1] - 1e-12));
        prop_assert!(p.explained_variance.iter().sum::<f64>() <= p.total_variance * (1.0 + 1e-9));
    }

    #[test]
    fn rendering_is_deterministic_and_bounded(seed in 0u64..100_000, r in 1usize..5, c in 1usize..5) {
        prop_assume!(r * c >= 4);
        let x = features(seed, r * c, 8);
        let p = pca_project_features(x.view(), 3).unwrap();
        let a = render_rgb_map(&p, (r, c), (r * 14, c * 14)).unwrap();
        let b = render_rgb_map(&pca_project_features(x.view(), 3).unwrap(), (r, c), (r * 14, c * 14)).unwrap();
        prop_assert_eq!(a.shape(), &[r * 14, c * 14, 3]);
        prop_assert_eq!(a, b);
    }
}
