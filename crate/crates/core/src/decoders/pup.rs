use rand::Rng;

use super::DecoderConfig;
use crate::autograd::{Tape, Var};
use crate::layers::{self, Conv2d, ConvNormRelu};
use crate::params::{ParamGroup, ParamStore};

/// Progressive upsampling: each stage is conv 3×3 + norm + ReLU followed by a
/// ×2 bilinear upsample. The first stage is `width` wide, later ones `width/8`.
#[derive(Clone, Debug)]
pub struct PupDecoder {
    stages: Vec<ConvNormRelu>,
    classifier: Conv2d,
}

impl PupDecoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, embed_dim: usize, config: &DecoderConfig, rng: &mut R) -> Self {
        let g = ParamGroup::Decoder;
        let w = config.channel_width;
        let narrow = (w / 8).max(1);
        let mut stages = Vec::with_capacity(config.pup_stages);
        let mut cin = embed_dim;
        for i in 0..config.pup_stages {
            let cout = if i == 0 { w } else { narrow };
            stages.push(ConvNormRelu::new(store, &format!("decoder.stages.{i}"), cin, cout, 3, g, rng));
            cin = cout;
        }
        let classifier = Conv2d::pointwise(store, "decoder.classifier", cin, config.class_count, g, rng);
        Self { stages, classifier }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, last: Var, out: (usize, usize)) -> Var {
        let mut x = last;
        for stage in &self.stages {
            x = stage.forward(tape, store, x);
            let s = tape.shape(x);
            let (h, w) = (s[2], s[3]);
            x = layers::resize_bilinear(tape, x, (2 * h, 2 * w));
        }
        let logits = self.classifier.forward(tape, store, x);
        layers::resize_bilinear(tape, logits, out)
    }
}
