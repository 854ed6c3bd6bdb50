use geofm_core::dataset::{
    augment_flip, lattice_size, min_max_normalize, preprocess_sample, DatasetManifest, TaskName, CHANNEL_MEAN,
    CHANNEL_STD,
};
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn manifest(task: TaskName, native: (usize, usize), classes: usize) -> DatasetManifest {
    let base = task.resize_target().unwrap_or(native);
    DatasetManifest {
        task_name: task,
        class_count: classes,
        sample_entries: vec![],
        native_size: native,
        target_size: (lattice_size(base.0), lattice_size(base.1)),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn standardized_output_is_a_fixed_point(seed in 0u64..100_000, h in 2usize..40, w in 2usize..40, scale in 0.01f64..1e4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = Array2::from_shape_fn((h, w), |_| rng.random_range(-1.0..1.0) * scale);
        let label = Array2::from_shape_fn((h, w), |_| rng.random_range(0..2usize));
        let m = manifest(TaskName::Fault, (h, w), 2);
        let out = preprocess_sample(raw.view(), label.view(), &m).unwrap();
        for c in 0..3 {
            let plane = out.image.index_axis(ndarray::Axis(0), c);
            let again = min_max_normalize(plane).mapv(|v| (v - CHANNEL_MEAN[c]) / CHANNEL_STD[c]);
            for (a, b) in plane.iter().zip(again.iter()) {
                prop_assert!((a - b).abs() < 1e-6, "{} vs {}", a, b);
            }
        }
    }

    #[test]
    fn flip_keeps_inputs_on_the_lattice(seed in 0u64..100_000, h in 2usize..30, w in 2usize..30, coin in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw = Array2::from_shape_fn((h, w), |_| rng.random_range(0.0..1.0));
        let label = Array2::from_shape_fn((h, w), |_| rng.random_range(0..6usize));
        let out = preprocess_sample(raw.view(), label.view(), &manifest(TaskName::Facies, (h, w), 6)).unwrap();
        let flipped = augment_flip(out.clone(), coin);
        prop_assert_eq!(flipped.height() % 14, 0);
        prop_assert_eq!(flipped.width() % 14, 0);
        prop_assert!(flipped.label.iter().all(|&l| l < 6));
        let hist = |l: &Array2<usize>| (0..6).map(|k| l.iter().filter(|&&v| v == k).count()).collect::<Vec<_>>();
        prop_assert_eq!(hist(&out.label), hist(&flipped.label));
    }
}
