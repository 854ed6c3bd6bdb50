//! Parameterized building blocks shared by the encoder, decoders and baseline.

use rand::Rng;

use ndarray::{ArrayD, IxDyn};

use crate::autograd::{Tape, Tensor, Var};
use crate::params::{self, ParamGroup, ParamId, ParamStore};

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    /// Uniform init with bound `1/√fan_in` on weight and bias.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_features: usize,
        out_features: usize,
        bias: bool,
        group: ParamGroup,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (in_features as f64).sqrt();
        let weight = store.insert(
            format!("{name}.weight"),
            params::uniform(&[out_features, in_features], bound, rng),
            group,
        );
        let bias = bias.then(|| {
            store.insert(
                format!("{name}.bias"),
                params::uniform(&[out_features], bound, rng),
                group,
            )
        });
        Self { weight, bias }
    }

    /// Truncated-normal (σ = 0.02) weights and zero bias, as for transformer layers.
    pub fn new_trunc_normal<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_features: usize,
        out_features: usize,
        group: ParamGroup,
        rng: &mut R,
    ) -> Self {
        let weight = store.insert(
            format!("{name}.weight"),
            params::trunc_normal(&[out_features, in_features], 0.02, rng),
            group,
        );
        let bias = Some(store.insert(format!("{name}.bias"), params::zeros(&[out_features]), group));
        Self { weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.weight);
        let b = self.bias.map(|b| tape.param(store, b));
        tape.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
        group: ParamGroup,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / ((in_channels * kernel * kernel) as f64).sqrt();
        let weight = store.insert(
            format!("{name}.weight"),
            params::uniform(&[out_channels, in_channels, kernel, kernel], bound, rng),
            group,
        );
        let bias = bias.then(|| {
            store.insert(
                format!("{name}.bias"),
                params::uniform(&[out_channels], bound, rng),
                group,
            )
        });
        Self {
            weight,
            bias,
            stride,
            pad,
        }
    }

    /// 3×3, stride 1, "same" padding.
    pub fn same3x3<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        bias: bool,
        group: ParamGroup,
        rng: &mut R,
    ) -> Self {
        Self::new(store, name, in_channels, out_channels, 3, 1, 1, bias, group, rng)
    }

    pub fn pointwise<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        group: ParamGroup,
        rng: &mut R,
    ) -> Self {
        Self::new(store, name, in_channels, out_channels, 1, 1, 0, true, group, rng)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.weight);
        let b = self.bias.map(|b| tape.param(store, b));
        tape.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// Transposed convolution whose kernel equals its stride (non-overlapping
/// upsampling). Weight layout `[in, out, k, k]`.
#[derive(Clone, Debug)]
pub struct PatchUpsample {
    pub weight: ParamId,
    pub bias: ParamId,
    pub factor: usize,
}

impl PatchUpsample {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        factor: usize,
        group: ParamGroup,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / ((out_channels * factor * factor) as f64).sqrt();
        let weight = store.insert(
            format!("{name}.weight"),
            params::uniform(&[in_channels, out_channels, factor, factor], bound, rng),
            group,
        );
        let bias = store.insert(format!("{name}.bias"), params::uniform(&[out_channels], bound, rng), group);
        Self {
            weight,
            bias,
            factor,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let s = self.factor;
        let shape = tape.shape(x).to_vec();
        let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        let wv = tape.param(store, self.weight);
        let out_c = tape.shape(wv)[1];
        let w2 = tape.reshape(wv, &[c, out_c * s * s]);
        let xt = tape.permute(x, &[0, 2, 3, 1]);
        let y = tape.matmul(xt, w2);
        let y = tape.reshape(y, &[n, h, w, out_c, s, s]);
        let y = tape.permute(y, &[0, 3, 1, 4, 2, 5]);
        let y = tape.reshape(y, &[n, out_c, h * s, w * s]);
        let b = tape.param(store, self.bias);
        let b = tape.reshape(b, &[1, out_c, 1, 1]);
        tape.add(y, b)
    }
}

/// Layer normalization with learned affine. Applied over the last axis, or over
/// channels of an NCHW map via [`Norm::forward_channels`].
#[derive(Clone, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, eps: f64, group: ParamGroup) -> Self {
        let gamma = store.insert(format!("{name}.weight"), params::filled(&[dim], 1.0), group);
        let beta = store.insert(format!("{name}.bias"), params::zeros(&[dim]), group);
        Self { gamma, beta, eps }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b, self.eps)
    }

    pub fn forward_channels(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.channel_norm(x, g, b, self.eps)
    }
}

/// Convolution followed by channel normalization and ReLU.
#[derive(Clone, Debug)]
pub struct ConvNormRelu {
    pub conv: Conv2d,
    pub norm: Norm,
}

impl ConvNormRelu {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        group: ParamGroup,
        rng: &mut R,
    ) -> Self {
        let conv = Conv2d::new(
            store,
            &format!("{name}.conv"),
            in_channels,
            out_channels,
            kernel,
            1,
            kernel / 2,
            true,
            group,
            rng,
        );
        let norm = Norm::new(store, &format!("{name}.norm"), out_channels, 1e-5, group);
        Self { conv, norm }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let y = self.conv.forward(tape, store, x);
        let y = self.norm.forward_channels(tape, store, y);
        tape.relu(y)
    }
}

/// Bilinear resize of the two trailing axes.
pub fn resize_bilinear(tape: &mut Tape, x: Var, out: (usize, usize)) -> Var {
    let shape = tape.shape(x);
    let n = shape.len();
    let (h, w) = (shape[n - 2], shape[n - 1]);
    if (h, w) == out {
        return x;
    }
    let (r, c) = crate::resample::bilinear_pair((h, w), out);
    tape.resample(x, r, c)
}

/// 2×2 max pooling with stride 2 on an NCHW map; odd trailing rows or columns
/// are dropped. Gradient flows to the first maximal element of each window.
pub fn max_pool2(tape: &mut Tape, x: Var) -> Var {
    let s = tape.shape(x).to_vec();
    let (n, c, h, w) = (s[0], s[1], s[2] / 2, s[3] / 2);
    let xv = tape.value(x);
    let mut value = ArrayD::zeros(IxDyn(&[n, c, h, w]));
    let mut argmax = Vec::with_capacity(n * c * h * w);
    for b in 0..n {
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let mut best = (2 * i, 2 * j);
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let (r, q) = (2 * i + di, 2 * j + dj);
                        if xv[[b, ch, r, q]] > xv[[b, ch, best.0, best.1]] {
                            best = (r, q);
                        }
                    }
                    value[[b, ch, i, j]] = xv[[b, ch, best.0, best.1]];
                    argmax.push(best);
                }
            }
        }
    }
    tape.custom(&[x], value, move |g: &Tensor| {
        let mut gx = ArrayD::zeros(IxDyn(&s));
        for ((idx, &gv), &(r, q)) in g.indexed_iter().zip(&argmax) {
            gx[[idx[0], idx[1], r, q]] += gv;
        }
        vec![Some(gx)]
    })
}
