//! Convolutional Unet baseline.
//!
//! Widths double at every stage (`base`, `2·base`, ...) with a bottleneck of
//! `base·2^depth`. Each stage is two 3×3 conv + norm + ReLU layers; the
//! contracting path downsamples with 2×2 max pooling and the expanding path
//! upsamples with 2×2 transposed convolutions before concatenating the skip.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{self, Conv2d, ConvNormRelu, PatchUpsample};
use crate::params::{ParamGroup, ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnetConfig {
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default = "default_base")]
    pub base_channels: usize,
    pub class_count: usize,
}

fn default_depth() -> usize {
    4
}

fn default_base() -> usize {
    24
}

impl UnetConfig {
    pub fn new(class_count: usize) -> Self {
        Self {
            depth: default_depth(),
            base_channels: default_base(),
            class_count,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(Error::Config("unet depth must be at least 1".into()));
        }
        if self.base_channels < 1 {
            return Err(Error::Config("unet base_channels must be at least 1".into()));
        }
        if self.class_count < 2 {
            return Err(Error::Config(format!("class_count must be at least 2, got {}", self.class_count)));
        }
        Ok(())
    }

    /// Inputs must be divisible by this on both axes.
    pub fn multiple(&self) -> usize {
        1 << self.depth
    }

    /// Analytic parameter count of the architecture.
    pub fn parameter_count(&self) -> usize {
        let conv = |i: usize, o: usize, k: usize| i * o * k * k + o;
        let double = |i: usize, o: usize| conv(i, o, 3) + 2 * o + conv(o, o, 3) + 2 * o;
        let b = self.base_channels;
        let mut total = 0;
        let mut cin = 3;
        for s in 0..self.depth {
            total += double(cin, b << s);
            cin = b << s;
        }
        total += double(cin, b << self.depth);
        for s in (0..self.depth).rev() {
            let wide = b << (s + 1);
            let narrow = b << s;
            total += wide * narrow * 4 + narrow;
            total += double(2 * narrow, narrow);
        }
        total + conv(b, self.class_count, 1)
    }
}

#[derive(Clone, Debug)]
struct DoubleConv([ConvNormRelu; 2]);

impl DoubleConv {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut R) -> Self {
        let g = ParamGroup::Decoder;
        Self([
            ConvNormRelu::new(store, &format!("{name}.0"), cin, cout, 3, g, rng),
            ConvNormRelu::new(store, &format!("{name}.1"), cout, cout, 3, g, rng),
        ])
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let y = self.0[0].forward(tape, store, x);
        self.0[1].forward(tape, store, y)
    }
}

#[derive(Clone, Debug)]
pub struct Unet {
    pub config: UnetConfig,
    down: Vec<DoubleConv>,
    bottleneck: DoubleConv,
    up: Vec<(PatchUpsample, DoubleConv)>,
    classifier: Conv2d,
    params: Vec<ParamId>,
}

impl Unet {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: UnetConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let first = store.len();
        let b = config.base_channels;
        let mut down = Vec::with_capacity(config.depth);
        let mut cin = 3;
        for s in 0..config.depth {
            down.push(DoubleConv::new(store, &format!("unet.down.{s}"), cin, b << s, rng));
            cin = b << s;
        }
        let bottleneck = DoubleConv::new(store, "unet.bottleneck", cin, b << config.depth, rng);
        let up = (0..config.depth)
            .rev()
            .map(|s| {
                let (wide, narrow) = (b << (s + 1), b << s);
                (
                    PatchUpsample::new(store, &format!("unet.up.{s}.upsample"), wide, narrow, 2, ParamGroup::Decoder, rng),
                    DoubleConv::new(store, &format!("unet.up.{s}.conv"), 2 * narrow, narrow, rng),
                )
            })
            .collect();
        let classifier = Conv2d::pointwise(store, "unet.classifier", b, config.class_count, ParamGroup::Decoder, rng);
        let params = (first..store.len()).map(ParamId).collect();
        Ok(Self {
            config,
            down,
            bottleneck,
            up,
            classifier,
            params,
        })
    }

    pub fn parameter_ids(&self) -> &[ParamId] {
        &self.params
    }

    /// Logits `N × C × H × W`; `H` and `W` must be multiples of `2^depth`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, images: Var) -> Result<Var> {
        let s = tape.shape(images).to_vec();
        let m = self.config.multiple();
        if s.len() != 4 || s[2] % m != 0 || s[3] % m != 0 || s[2] == 0 || s[3] == 0 {
            return Err(Error::Invalid(format!(
                "unet input {s:?} must be N×3×H×W with H and W divisible by {m}"
            )));
        }
        let mut skips = Vec::with_capacity(self.down.len());
        let mut x = images;
        for stage in &self.down {
            x = stage.forward(tape, store, x);
            skips.push(x);
            x = layers::max_pool2(tape, x);
        }
        x = self.bottleneck.forward(tape, store, x);
        for (upsample, conv) in &self.up {
            let skip = skips.pop().expect("one skip per stage");
            let y = upsample.forward(tape, store, x);
            let y = tape.concat(&[skip, y], 1);
            x = conv.forward(tape, store, y);
        }
        Ok(self.classifier.forward(tape, store, x))
    }
}

/// Trainable scalars of the baseline.
pub fn unet_param_count(unet: &Unet, store: &ParamStore) -> usize {
    unet.parameter_ids()
        .iter()
        .map(|&id| store.get(id))
        .filter(|p| p.trainable)
        .map(|p| p.len())
        .sum()
}
