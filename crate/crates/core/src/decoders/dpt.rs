use rand::Rng;

use super::DecoderConfig;
use crate::autograd::{Tape, Var};
use crate::layers::{self, Conv2d, PatchUpsample};
use crate::params::{ParamGroup, ParamStore};

/// Residual convolution unit: `x + conv(relu(conv(relu(x))))`.
#[derive(Clone, Debug)]
struct ResidualUnit {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl ResidualUnit {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, width: usize, rng: &mut R) -> Self {
        let g = ParamGroup::Decoder;
        Self {
            conv1: Conv2d::same3x3(store, &format!("{name}.conv1"), width, width, true, g, rng),
            conv2: Conv2d::same3x3(store, &format!("{name}.conv2"), width, width, true, g, rng),
        }
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let y = tape.relu(x);
        let y = self.conv1.forward(tape, store, y);
        let y = tape.relu(y);
        let y = self.conv2.forward(tape, store, y);
        tape.add(x, y)
    }
}

#[derive(Clone, Debug)]
struct FusionBlock {
    skip: Option<ResidualUnit>,
    refine: ResidualUnit,
    out: Conv2d,
}

#[derive(Clone, Debug)]
enum Resample {
    Up(PatchUpsample),
    Identity,
    Down(Conv2d),
}

/// Dense-prediction head: four taps reassembled at ×4, ×2, ×1 and ×½ of the
/// patch grid, projected to `width` channels and fused coarse to fine.
#[derive(Clone, Debug)]
pub struct DptDecoder {
    project: Vec<Conv2d>,
    resample: Vec<Resample>,
    layer_rn: Vec<Conv2d>,
    fusion: Vec<FusionBlock>,
    head: [Conv2d; 3],
}

impl DptDecoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, embed_dim: usize, config: &DecoderConfig, rng: &mut R) -> Self {
        let g = ParamGroup::Decoder;
        let w = config.channel_width;
        let chans = [(w / 4).max(1), (w / 2).max(1), w, 2 * w];
        let project = chans
            .iter()
            .enumerate()
            .map(|(i, &c)| Conv2d::pointwise(store, &format!("decoder.reassemble.{i}.project"), embed_dim, c, g, rng))
            .collect();
        let resample = vec![
            Resample::Up(PatchUpsample::new(store, "decoder.reassemble.0.resample", chans[0], chans[0], 4, g, rng)),
            Resample::Up(PatchUpsample::new(store, "decoder.reassemble.1.resample", chans[1], chans[1], 2, g, rng)),
            Resample::Identity,
            Resample::Down(Conv2d::new(store, "decoder.reassemble.3.resample", chans[3], chans[3], 3, 2, 1, true, g, rng)),
        ];
        let layer_rn = chans
            .iter()
            .enumerate()
            .map(|(i, &c)| Conv2d::same3x3(store, &format!("decoder.layer_rn.{i}"), c, w, false, g, rng))
            .collect();
        // Built deepest first; the deepest block has no skip input.
        let fusion = (0..4)
            .rev()
            .map(|i| {
                let name = format!("decoder.fusion.{i}");
                FusionBlock {
                    skip: (i != 3).then(|| ResidualUnit::new(store, &format!("{name}.skip"), w, rng)),
                    refine: ResidualUnit::new(store, &format!("{name}.refine"), w, rng),
                    out: Conv2d::pointwise(store, &format!("{name}.out"), w, w, g, rng),
                }
            })
            .collect();
        let mid = (w / 2).max(1);
        let narrow = (w / 8).max(1);
        let head = [
            Conv2d::same3x3(store, "decoder.head.0", w, mid, true, g, rng),
            Conv2d::same3x3(store, "decoder.head.1", mid, narrow, true, g, rng),
            Conv2d::pointwise(store, "decoder.head.2", narrow, config.class_count, g, rng),
        ];
        Self {
            project,
            resample,
            layer_rn,
            fusion,
            head,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, taps: [Var; 4], out: (usize, usize)) -> Var {
        let levels: Vec<Var> = (0..4)
            .map(|i| {
                let x = self.project[i].forward(tape, store, taps[i]);
                let x = match &self.resample[i] {
                    Resample::Up(u) => u.forward(tape, store, x),
                    Resample::Identity => x,
                    Resample::Down(c) => c.forward(tape, store, x),
                };
                self.layer_rn[i].forward(tape, store, x)
            })
            .collect();
        let mut path: Option<Var> = None;
        for (k, block) in self.fusion.iter().enumerate() {
            let level = 3 - k;
            let mut x = match (path, &block.skip) {
                (Some(prev), Some(unit)) => {
                    let s = unit.forward(tape, store, levels[level]);
                    tape.add(prev, s)
                }
                _ => levels[level],
            };
            x = block.refine.forward(tape, store, x);
            if level > 0 {
                let s = tape.shape(levels[level - 1]);
                let target = (s[2], s[3]);
                x = layers::resize_bilinear(tape, x, target);
            }
            path = Some(block.out.forward(tape, store, x));
        }
        let x = path.expect("four fusion blocks");
        let x = self.head[0].forward(tape, store, x);
        let x = self.head[1].forward(tape, store, x);
        let x = tape.relu(x);
        let logits = self.head[2].forward(tape, store, x);
        layers::resize_bilinear(tape, logits, out)
    }
}
