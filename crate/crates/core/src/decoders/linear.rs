use rand::Rng;

use super::DecoderConfig;
use crate::autograd::{Tape, Var};
use crate::layers::{self, Conv2d};
use crate::params::{ParamGroup, ParamStore};

/// Per-patch affine map from the final tap, upsampled bilinearly.
#[derive(Clone, Debug)]
pub struct LinearDecoder {
    classifier: Conv2d,
}

impl LinearDecoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, embed_dim: usize, config: &DecoderConfig, rng: &mut R) -> Self {
        Self {
            classifier: Conv2d::pointwise(store, "decoder.classifier", embed_dim, config.class_count, ParamGroup::Decoder, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, last: Var, out: (usize, usize)) -> Var {
        let logits = self.classifier.forward(tape, store, last);
        layers::resize_bilinear(tape, logits, out)
    }
}
