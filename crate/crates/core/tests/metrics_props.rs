use geofm_core::evaluation::{compute_miou_mpa, confusion_counts};
use geofm_core::training::weighted_dice_loss;
use ndarray::{Array2, Array3};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn masks(seed: u64, c: usize, h: usize, w: usize) -> (Array2<usize>, Array2<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pred = Array2::from_shape_fn((h, w), |_| rng.random_range(0..c));
    let label = Array2::from_shape_fn((h, w), |_| rng.random_range(0..c));
    (pred, label)
}

fn scores(pred: &Array2<usize>, label: &Array2<usize>, c: usize) -> (f64, f64, Vec<Option<f64>>) {
    let s = compute_miou_mpa(&confusion_counts(pred.view(), label.view(), c, None).unwrap()).unwrap();
    (s.miou, s.mpa, s.per_class_iou)
}

/// Independent oracle: loops over pixels once per class.
fn oracle(pred: &Array2<usize>, label: &Array2<usize>, c: usize) -> (f64, f64) {
    let (mut iou, mut pa) = (vec![], vec![]);
    for k in 0..c {
        let (mut i, mut u, mut t) = (0, 0, 0);
        for (&p, &l) in pred.iter().zip(label.iter()) {
            i += (p == k && l == k) as usize;
            u += (p == k || l == k) as usize;
            t += (l == k) as usize;
        }
        if t > 0 {
            iou.push(i as f64 / u as f64);
            pa.push(i as f64 / t as f64);
        }
    }
    (iou.iter().sum::<f64>() / iou.len() as f64, pa.iter().sum::<f64>() / pa.len() as f64)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn brute_force_agreement(seed in 0u64..1_000_000, six in any::<bool>()) {
        let c = if six { 6 } else { 2 };
        let (pred, label) = masks(seed, c, 8, 8);
        let (miou, mpa, _) = scores(&pred, &label, c);
        let (om, op) = oracle(&pred, &label, c);
        prop_assert!((miou - om).abs() <= 1e-9 && (mpa - op).abs() <= 1e-9);
    }

    #[test]
    fn pixel_order_does_not_matter(seed in 0u64..1_000_000, c in 2usize..6) {
        let (pred, label) = masks(seed, c, 6, 7);
        let mut order: Vec<usize> = (0..42).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 1));
        let shuffle = |m: &Array2<usize>| {
            let flat: Vec<usize> = m.iter().copied().collect();
            Array2::from_shape_vec((6, 7), order.iter().map(|&i| flat[i]).collect()).unwrap()
        };
        let (a, b, _) = scores(&pred, &label, c);
        let (x, y, _) = scores(&shuffle(&pred), &shuffle(&label), c);
        prop_assert!((a - x).abs() < 1e-12 && (b - y).abs() < 1e-12);
    }

    #[test]
    fn relabeling_permutes_per_class_scores(seed in 0u64..1_000_000, c in 2usize..6) {
        let (pred, label) = masks(seed, c, 8, 8);
        let mut perm: Vec<usize> = (0..c).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 2));
        let (a, b, per) = scores(&pred, &label, c);
        let (x, y, per2) = scores(&pred.mapv(|k| perm[k]), &label.mapv(|k| perm[k]), c);
        prop_assert!((a - x).abs() < 1e-12 && (b - y).abs() < 1e-12);
        for k in 0..c {
            prop_assert_eq!(per[k], per2[perm[k]]);
        }
    }

    #[test]
    fn binary_iou_is_dice_transformed(seed in 0u64..1_000_000) {
        let (pred, label) = masks(seed, 2, 8, 8);
        prop_assume!(label.iter().any(|&l| l == 1) && label.iter().any(|&l| l == 0));
        let (_, _, per) = scores(&pred, &label, 2);
        let mut hard = Array3::zeros((2, 8, 8));
        for ((i, j), &k) in pred.indexed_iter() {
            hard[[k, i, j]] = 1.0;
        }
        let dice = weighted_dice_loss(hard.view(), label.view(), None).unwrap().per_class_dice[1];
        let iou = per[1].unwrap();
        prop_assert!((iou - dice / (2.0 - dice)).abs() < 1e-5, "{} vs {}", iou, dice);
    }
}
