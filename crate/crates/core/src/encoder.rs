//! ViT-S/14 encoder with multi-depth feature taps.
//!
//! Parameter names follow the layout of the public DINOv2 ViT-S/14 checkpoints
//! (`patch_embed.proj.weight`, `blocks.{i}.attn.qkv.weight`, `blocks.{i}.ls1.gamma`,
//! `norm.weight`, ...), so such a checkpoint loads by name without a
//! translation table. Block indices in names are 0-based; tap indices in
//! [`EncoderConfig::tap_layers`] are 1-based.

use std::collections::BTreeMap;

use ndarray::{Array4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::autograd::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::layers::{Conv2d, Linear, Norm};
use crate::lora::{AdapterParams, Projection};
use crate::params::{self, ParamGroup, ParamId, ParamStore};
use crate::resample;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub head_count: usize,
    /// 1-based block indices whose outputs are exposed.
    pub tap_layers: Vec<usize>,
    pub mlp_ratio: usize,
    /// Side of the square patch grid the stored positional table covers.
    pub base_grid: usize,
    pub layer_norm_eps: f64,
    pub layer_scale_init: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::vit_small()
    }
}

impl EncoderConfig {
    /// ViT-S/14 geometry: 384 wide, 12 blocks, 6 heads, taps 3/6/9/12.
    pub fn vit_small() -> Self {
        Self {
            patch_size: 14,
            embed_dim: 384,
            depth: 12,
            head_count: 6,
            tap_layers: vec![3, 6, 9, 12],
            mlp_ratio: 4,
            base_grid: 37,
            layer_norm_eps: 1e-6,
            layer_scale_init: 1.0,
        }
    }

    /// Small geometry for fast experiments.
    pub fn toy(depth: usize, embed_dim: usize, head_count: usize, tap_layers: Vec<usize>) -> Self {
        Self {
            embed_dim,
            depth,
            head_count,
            tap_layers,
            base_grid: 4,
            ..Self::vit_small()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.embed_dim == 0 || self.depth == 0 || self.head_count == 0 {
            return Err(Error::Config("encoder sizes must be positive".into()));
        }
        if self.embed_dim % self.head_count != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by head_count {}",
                self.embed_dim, self.head_count
            )));
        }
        if self.tap_layers.is_empty() {
            return Err(Error::Config("tap_layers is empty".into()));
        }
        if let Some(&bad) = self.tap_layers.iter().find(|&&t| t == 0 || t > self.depth) {
            return Err(Error::Config(format!(
                "tap layer {bad} outside [1, {}]",
                self.depth
            )));
        }
        if self.tap_layers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "tap_layers {:?} must be strictly increasing",
                self.tap_layers
            )));
        }
        if self.base_grid == 0 {
            return Err(Error::Config("base_grid must be positive".into()));
        }
        Ok(())
    }

    /// Patch grid for an `h × w` input.
    pub fn grid_for(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if h % self.patch_size != 0 || w % self.patch_size != 0 || h == 0 || w == 0 {
            return Err(Error::Invalid(format!(
                "input {h}×{w} is not a positive multiple of the patch size {}",
                self.patch_size
            )));
        }
        Ok((h / self.patch_size, w / self.patch_size))
    }

    /// Sequence length (patch tokens plus the class token) for an `h × w` input.
    pub fn token_count(&self, h: usize, w: usize) -> Result<usize> {
        let (r, c) = self.grid_for(h, w)?;
        Ok(r * c + 1)
    }
}

#[derive(Clone, Debug)]
pub struct Attention {
    pub qkv: Linear,
    pub proj: Linear,
    pub adapters: BTreeMap<Projection, AdapterParams>,
}

#[derive(Clone, Debug)]
pub struct Block {
    pub norm1: Norm,
    pub attn: Attention,
    pub ls1: ParamId,
    pub norm2: Norm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub ls2: ParamId,
}

#[derive(Clone, Debug)]
pub struct VitEncoder {
    pub config: EncoderConfig,
    pub patch_embed: Conv2d,
    pub cls_token: ParamId,
    pub pos_embed: ParamId,
    pub blocks: Vec<Block>,
    pub norm: Norm,
}

/// Patch-feature grids recorded on a tape, one per tap layer.
#[derive(Clone, Debug)]
pub struct FeatureTaps {
    pub layers: Vec<usize>,
    /// Each `N × D × rows × cols`.
    pub grids: Vec<Var>,
    /// Each `N × D`.
    pub class_tokens: Vec<Var>,
    pub grid_shape: (usize, usize),
}

impl FeatureTaps {
    pub fn len(&self) -> usize {
        self.grids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grids.is_empty()
    }

    pub fn last(&self) -> Option<Var> {
        self.grids.last().copied()
    }

    /// Values of tap `i` as `N × rows × cols × D`.
    pub fn grid_values(&self, tape: &Tape, i: usize) -> Array4<f64> {
        tape.value(self.grids[i])
            .view()
            .permuted_axes(ndarray::IxDyn(&[0, 2, 3, 1]))
            .as_standard_layout()
            .into_owned()
            .into_dimensionality()
            .expect("4-D tap")
    }
}

/// Counts reported after reading a checkpoint.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadReport {
    pub matched: Vec<String>,
    pub missing: Vec<String>,
    pub ignored: Vec<String>,
    pub encoder_parameters: usize,
}

impl VitEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let g = ParamGroup::Encoder;
        let p = config.patch_size;
        let patch_embed = Conv2d::new(store, "patch_embed.proj", 3, d, p, p, 0, true, g, rng);
        let cls_token = store.insert("cls_token", params::trunc_normal(&[1, 1, d], 0.02, rng), g);
        let tokens = config.base_grid * config.base_grid + 1;
        let pos_embed = store.insert("pos_embed", params::trunc_normal(&[1, tokens, d], 0.02, rng), g);
        let hidden = d * config.mlp_ratio;
        let eps = config.layer_norm_eps;
        let blocks = (0..config.depth)
            .map(|i| {
                let name = |s: &str| format!("blocks.{i}.{s}");
                Block {
                    norm1: Norm::new(store, &name("norm1"), d, eps, g),
                    attn: Attention {
                        qkv: Linear::new_trunc_normal(store, &name("attn.qkv"), d, 3 * d, g, rng),
                        proj: Linear::new_trunc_normal(store, &name("attn.proj"), d, d, g, rng),
                        adapters: BTreeMap::new(),
                    },
                    ls1: store.insert(name("ls1.gamma"), params::filled(&[d], config.layer_scale_init), g),
                    norm2: Norm::new(store, &name("norm2"), d, eps, g),
                    fc1: Linear::new_trunc_normal(store, &name("mlp.fc1"), d, hidden, g, rng),
                    fc2: Linear::new_trunc_normal(store, &name("mlp.fc2"), hidden, d, g, rng),
                    ls2: store.insert(name("ls2.gamma"), params::filled(&[d], config.layer_scale_init), g),
                }
            })
            .collect();
        let norm = Norm::new(store, "norm", d, eps, g);
        Ok(Self {
            config,
            patch_embed,
            cls_token,
            pos_embed,
            blocks,
            norm,
        })
    }

    /// Names of every base encoder tensor (adapters excluded).
    pub fn base_parameter_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.cls_token, self.pos_embed, self.patch_embed.weight];
        ids.extend(self.patch_embed.bias);
        for b in &self.blocks {
            ids.extend([b.norm1.gamma, b.norm1.beta]);
            ids.push(b.attn.qkv.weight);
            ids.extend(b.attn.qkv.bias);
            ids.push(b.attn.proj.weight);
            ids.extend(b.attn.proj.bias);
            ids.extend([b.ls1, b.norm2.gamma, b.norm2.beta, b.fc1.weight]);
            ids.extend(b.fc1.bias);
            ids.push(b.fc2.weight);
            ids.extend(b.fc2.bias);
            ids.push(b.ls2);
        }
        ids.extend([self.norm.gamma, self.norm.beta]);
        ids
    }

    /// Patch tokens plus class token with positional embeddings added:
    /// `N × (rows·cols + 1) × D`.
    pub fn patchify_and_embed(&self, tape: &mut Tape, store: &ParamStore, images: Var) -> Result<(Var, (usize, usize))> {
        let shape = tape.shape(images).to_vec();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::shape("encoder input", &[0, 3, 0, 0], &shape));
        }
        let (n, h, w) = (shape[0], shape[2], shape[3]);
        let (rows, cols) = self.config.grid_for(h, w)?;
        let d = self.config.embed_dim;
        let x = self.patch_embed.forward(tape, store, images);
        let x = tape.reshape(x, &[n, d, rows * cols]);
        let x = tape.permute(x, &[0, 2, 1]);
        let cls = tape.param(store, self.cls_token);
        let cls = if n == 1 {
            cls
        } else {
            let copies = vec![cls; n];
            tape.concat(&copies, 0)
        };
        let x = tape.concat(&[cls, x], 1);
        let pos = tape.param(store, self.pos_embed);
        let pos = interpolate_pos_embed(tape, pos, self.config.base_grid, (rows, cols))?;
        Ok((tape.add(x, pos), (rows, cols)))
    }

    /// Run the transformer blocks on an embedded token sequence, returning the
    /// hidden state after each block (the last one after the final norm if it
    /// is `depth`).
    pub fn run_blocks(&self, tape: &mut Tape, store: &ParamStore, mut x: Var) -> Vec<Var> {
        let mut outputs = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            x = self.block_forward(tape, store, block, x);
            outputs.push(x);
        }
        if let Some(last) = outputs.last_mut() {
            *last = self.norm.forward(tape, store, *last);
        }
        outputs
    }

    fn block_forward(&self, tape: &mut Tape, store: &ParamStore, b: &Block, x: Var) -> Var {
        let h = b.norm1.forward(tape, store, x);
        let h = self.attention(tape, store, &b.attn, h);
        let ls1 = tape.param(store, b.ls1);
        let h = tape.mul(h, ls1);
        let x = tape.add(x, h);
        let h = b.norm2.forward(tape, store, x);
        let h = b.fc1.forward(tape, store, h);
        let h = tape.gelu(h);
        let h = b.fc2.forward(tape, store, h);
        let ls2 = tape.param(store, b.ls2);
        let h = tape.mul(h, ls2);
        tape.add(x, h)
    }

    fn attention(&self, tape: &mut Tape, store: &ParamStore, attn: &Attention, x: Var) -> Var {
        let shape = tape.shape(x).to_vec();
        let (n, t, d) = (shape[0], shape[1], shape[2]);
        let heads = self.config.head_count;
        let hd = d / heads;
        let qkv = attn.qkv.forward(tape, store, x);
        let mut parts = [Projection::Query, Projection::Key, Projection::Value].map(|p| {
            let i = p.index();
            (p, tape.slice(qkv, 2, i * d, (i + 1) * d))
        });
        for (p, v) in parts.iter_mut() {
            if let Some(adapter) = attn.adapters.get(p) {
                let delta = adapter.delta(tape, store, x);
                *v = tape.add(*v, delta);
            }
        }
        let [(_, q), (_, k), (_, v)] = parts;
        let split = |tape: &mut Tape, v: Var, order: &[usize]| {
            let v = tape.reshape(v, &[n, t, heads, hd]);
            let v = tape.permute(v, order);
            let s = tape.shape(v).to_vec();
            tape.reshape(v, &[n * heads, s[2], s[3]])
        };
        let q = split(tape, q, &[0, 2, 1, 3]);
        let kt = split(tape, k, &[0, 2, 3, 1]);
        let v = split(tape, v, &[0, 2, 1, 3]);
        let scores = tape.bmm(q, kt);
        let scores = tape.scale(scores, 1.0 / (hd as f64).sqrt());
        let weights = tape.softmax(scores, 2);
        let out = tape.bmm(weights, v);
        let out = tape.reshape(out, &[n, heads, t, hd]);
        let out = tape.permute(out, &[0, 2, 1, 3]);
        let out = tape.reshape(out, &[n, t, d]);
        attn.proj.forward(tape, store, out)
    }

    /// Encode `images` (`N × 3 × H × W`) and expose the configured taps.
    pub fn forward_with_taps(&self, tape: &mut Tape, store: &ParamStore, images: Var) -> Result<FeatureTaps> {
        let (tokens, (rows, cols)) = self.patchify_and_embed(tape, store, images)?;
        let n = tape.shape(images)[0];
        let d = self.config.embed_dim;
        let hidden = self.run_blocks(tape, store, tokens);
        let mut taps = FeatureTaps {
            layers: self.config.tap_layers.clone(),
            grids: Vec::new(),
            class_tokens: Vec::new(),
            grid_shape: (rows, cols),
        };
        let t = rows * cols + 1;
        for &layer in &self.config.tap_layers {
            let h = hidden[layer - 1];
            let cls = tape.slice(h, 1, 0, 1);
            taps.class_tokens.push(tape.reshape(cls, &[n, d]));
            let patches = tape.slice(h, 1, 1, t);
            let grid = tape.permute(patches, &[0, 2, 1]);
            taps.grids.push(tape.reshape(grid, &[n, d, rows, cols]));
        }
        Ok(taps)
    }

    /// Copy tensors from a checkpoint by canonical name.
    ///
    /// Names are matched after stripping one of the prefixes `module.`,
    /// `backbone.` or `encoder.`. Archive tensors that are not encoder
    /// parameters are reported as ignored; encoder parameters absent from the
    /// archive are reported as missing.
    pub fn load_pretrained_weights(&self, store: &mut ParamStore, archive: &Archive) -> Result<LoadReport> {
        let mut by_name: BTreeMap<String, &str> = BTreeMap::new();
        for name in archive.names() {
            let canonical = ["module.", "backbone.", "encoder."]
                .iter()
                .find_map(|p| name.strip_prefix(p))
                .unwrap_or(name);
            by_name.insert(canonical.to_string(), name);
        }
        let mut report = LoadReport::default();
        let mut wanted = std::collections::BTreeSet::new();
        let mut updates: Vec<(ParamId, Tensor)> = Vec::new();
        for id in self.base_parameter_ids() {
            let p = store.get(id);
            wanted.insert(p.name.clone());
            match by_name.get(&p.name) {
                Some(src) => {
                    let stored = archive.get(src).expect("name from archive");
                    if stored.shape != p.value().shape() {
                        return Err(Error::shape(format!("checkpoint tensor `{src}`"), p.value().shape(), &stored.shape));
                    }
                    updates.push((id, stored.to_f64()));
                    report.matched.push(p.name.clone());
                }
                None => report.missing.push(p.name.clone()),
            }
        }
        for (canonical, original) in &by_name {
            if !wanted.contains(canonical) {
                report.ignored.push((*original).to_string());
            }
        }
        for (id, value) in updates {
            *store.get_mut(id).value_mut() = value;
        }
        report.encoder_parameters = self
            .base_parameter_ids()
            .into_iter()
            .map(|id| store.get(id).len())
            .sum();
        Ok(report)
    }
}

/// Resample the patch block of a positional table (`1 × (g₀² + 1) × D`) to a
/// `rows × cols` grid with bicubic interpolation; the class-token row is kept.
pub fn interpolate_pos_embed(tape: &mut Tape, table: Var, base_grid: usize, target: (usize, usize)) -> Result<Var> {
    let (rows, cols) = target;
    if rows == 0 || cols == 0 {
        return Err(Error::Invalid(format!("positional target grid {target:?} has a zero dimension")));
    }
    let shape = tape.shape(table).to_vec();
    let d = *shape.last().unwrap_or(&0);
    if shape.len() != 3 || shape[0] != 1 || shape[1] != base_grid * base_grid + 1 {
        return Err(Error::shape(
            "positional table",
            &[1, base_grid * base_grid + 1, d],
            &shape,
        ));
    }
    if target == (base_grid, base_grid) {
        return Ok(table);
    }
    let cls = tape.slice(table, 1, 0, 1);
    let patches = tape.slice(table, 1, 1, shape[1]);
    let grid = tape.reshape(patches, &[base_grid, base_grid, d]);
    let grid = tape.permute(grid, &[2, 0, 1]);
    let r = std::sync::Arc::new(resample::bicubic_matrix(base_grid, rows));
    let c = std::sync::Arc::new(resample::bicubic_matrix(base_grid, cols));
    let grid = tape.resample(grid, r, c);
    let grid = tape.permute(grid, &[1, 2, 0]);
    let patches = tape.reshape(grid, &[1, rows * cols, d]);
    Ok(tape.concat(&[cls, patches], 1))
}

/// Value-level version of [`interpolate_pos_embed`].
pub fn interpolate_pos_table(table: &Tensor, target: (usize, usize)) -> Result<Tensor> {
    let tokens = table.shape().get(1).copied().unwrap_or(0);
    let base = ((tokens.saturating_sub(1)) as f64).sqrt().round() as usize;
    let mut tape = Tape::inference();
    let t = tape.constant(table.clone());
    let out = interpolate_pos_embed(&mut tape, t, base, target)?;
    Ok(tape.value(out).clone())
}

/// Stack per-sample tap grids (`rows × cols × D`) for sample `i` of a batch.
pub fn sample_grid(values: &Array4<f64>, i: usize) -> ndarray::Array3<f64> {
    values.index_axis(Axis(0), i).to_owned()
}
