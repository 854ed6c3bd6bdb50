#![allow(dead_code)]

use geofm_core::dataset::{InMemorySource, ModelInput};
use geofm_core::decoders::{DecoderConfig, DecoderKind};
use geofm_core::encoder::EncoderConfig;
use geofm_core::lora::FinetunePolicy;
use geofm_core::model::Segmenter;
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const PATCH: usize = 14;

/// `count` samples on a `grid × grid` patch lattice. Each has a rectangular
/// foreground blob covering whole patches, bright on a textured background.
pub fn blob_source(count: usize, grid: usize, seed: u64) -> InMemorySource {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = grid * PATCH;
    let samples = (0..count)
        .map(|_| {
            let h = rng.random_range(1..grid);
            let w = rng.random_range(1..grid);
            let r0 = rng.random_range(0..=grid - h) * PATCH;
            let c0 = rng.random_range(0..=grid - w) * PATCH;
            let mut label = Array2::zeros((n, n));
            let mut image = Array3::zeros((3, n, n));
            for r in 0..n {
                for c in 0..n {
                    let fg = (r0..r0 + h * PATCH).contains(&r) && (c0..c0 + w * PATCH).contains(&c);
                    label[[r, c]] = fg as usize;
                    let noise: f64 = rng.random_range(-0.2..0.2);
                    for ch in 0..3 {
                        image[[ch, r, c]] = if fg { 1.0 } else { -1.0 } + noise;
                    }
                }
            }
            ModelInput {
                image,
                label,
                valid_mask: Array2::from_elem((n, n), true),
            }
        })
        .collect();
    InMemorySource {
        samples,
        class_count: 2,
        slice_indices: None,
    }
}

pub fn toy_encoder() -> EncoderConfig {
    EncoderConfig::toy(2, 32, 2, vec![1, 2])
}

pub fn toy_model(kind: DecoderKind, policy: &FinetunePolicy, seed: u64) -> Segmenter {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let encoder = if kind.uses_all_taps() {
        EncoderConfig::toy(4, 32, 2, vec![1, 2, 3, 4])
    } else {
        toy_encoder()
    };
    let decoder = DecoderConfig::new(kind, 2).with_width(8);
    Segmenter::foundation(encoder, decoder, policy, &mut rng).expect("toy model")
}
