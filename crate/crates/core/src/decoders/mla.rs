use rand::Rng;

use super::DecoderConfig;
use crate::autograd::{Tape, Var};
use crate::layers::{self, Conv2d, ConvNormRelu};
use crate::params::{ParamGroup, ParamStore};

/// Multi-level aggregation over four taps at patch-grid resolution.
///
/// Each tap is reduced to `width` channels, streams are summed top-down from
/// the deepest tap, refined by two 3×3 convolutions each, concatenated and
/// fused.
#[derive(Clone, Debug)]
pub struct MlaDecoder {
    reduce: Vec<ConvNormRelu>,
    streams: Vec<[ConvNormRelu; 2]>,
    fuse: [ConvNormRelu; 2],
    classifier: Conv2d,
}

impl MlaDecoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, embed_dim: usize, config: &DecoderConfig, rng: &mut R) -> Self {
        let g = ParamGroup::Decoder;
        let w = config.channel_width;
        let reduce = (0..4)
            .map(|i| ConvNormRelu::new(store, &format!("decoder.reduce.{i}"), embed_dim, w, 1, g, rng))
            .collect();
        let streams = (0..4)
            .map(|i| {
                [0, 1].map(|j| ConvNormRelu::new(store, &format!("decoder.streams.{i}.{j}"), w, w, 3, g, rng))
            })
            .collect();
        let half = (w / 2).max(1);
        let fuse = [
            ConvNormRelu::new(store, "decoder.fuse.0", 4 * w, 2 * w, 3, g, rng),
            ConvNormRelu::new(store, "decoder.fuse.1", 2 * w, half, 3, g, rng),
        ];
        let classifier = Conv2d::pointwise(store, "decoder.classifier", half, config.class_count, g, rng);
        Self {
            reduce,
            streams,
            fuse,
            classifier,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, taps: [Var; 4], out: (usize, usize)) -> Var {
        let reduced: Vec<Var> = taps
            .iter()
            .zip(&self.reduce)
            .map(|(&t, r)| r.forward(tape, store, t))
            .collect();
        let mut aggregated = [reduced[3]; 4];
        for i in (0..3).rev() {
            aggregated[i] = tape.add(reduced[i], aggregated[i + 1]);
        }
        let streams: Vec<Var> = aggregated
            .iter()
            .zip(&self.streams)
            .map(|(&a, [c0, c1])| {
                let y = c0.forward(tape, store, a);
                c1.forward(tape, store, y)
            })
            .collect();
        let x = tape.concat(&streams, 1);
        let x = self.fuse[0].forward(tape, store, x);
        let x = self.fuse[1].forward(tape, store, x);
        let logits = self.classifier.forward(tape, store, x);
        layers::resize_bilinear(tape, logits, out)
    }
}
