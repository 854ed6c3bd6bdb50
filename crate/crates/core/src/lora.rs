//! Low-rank adapters on the query, key and value projections.
//!
//! An adapted projection computes `W₀·x + (alpha/r)·B·(A·x)` where `W₀` stays
//! frozen, `A` is `r × N_in` and `B` is `N_out × r`. Because `B` starts at
//! zero the adapted encoder initially reproduces the base encoder exactly.

use std::collections::BTreeSet;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::archive::{Archive, Dtype};
use crate::autograd::{Tape, Var};
use crate::encoder::VitEncoder;
use crate::error::{Error, Result};
use crate::params::{self, ParamCounts, ParamGroup, ParamId, ParamStore};

/// Which slice of the fused `qkv` projection an adapter wraps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Projection {
    Query,
    Key,
    Value,
}

impl Projection {
    pub const ALL: [Projection; 3] = [Projection::Query, Projection::Key, Projection::Value];

    /// Position inside the fused `qkv` output.
    pub fn index(self) -> usize {
        match self {
            Projection::Query => 0,
            Projection::Key => 1,
            Projection::Value => 2,
        }
    }

    pub fn short(self) -> &'static str {
        match self {
            Projection::Query => "q",
            Projection::Key => "k",
            Projection::Value => "v",
        }
    }
}

impl FromStr for Projection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "q" | "query" => Ok(Projection::Query),
            "k" | "key" => Ok(Projection::Key),
            "v" | "value" => Ok(Projection::Value),
            other => Err(Error::Config(format!("unknown LoRA target `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneMode {
    #[default]
    Full,
    Lora,
}

impl FromStr for FinetuneMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Ok(FinetuneMode::Full),
            "lora" => Ok(FinetuneMode::Lora),
            other => Err(Error::Config(format!("unknown fine-tuning mode `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetunePolicy {
    pub mode: FinetuneMode,
    pub lora_targets: BTreeSet<Projection>,
    pub rank: usize,
    /// Scaling numerator; `None` means `alpha = rank`.
    pub alpha: Option<f64>,
}

impl Default for FinetunePolicy {
    fn default() -> Self {
        Self::full()
    }
}

impl FinetunePolicy {
    pub fn full() -> Self {
        Self {
            mode: FinetuneMode::Full,
            lora_targets: Projection::ALL.into_iter().collect(),
            rank: 8,
            alpha: None,
        }
    }

    pub fn lora(rank: usize) -> Self {
        Self {
            mode: FinetuneMode::Lora,
            rank,
            ..Self::full()
        }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha.unwrap_or(self.rank as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode == FinetuneMode::Lora {
            if self.rank < 1 {
                return Err(Error::Config(format!("LoRA rank must be at least 1, got {}", self.rank)));
            }
            if self.lora_targets.is_empty() {
                return Err(Error::Config("LoRA target set is empty".into()));
            }
            if !self.alpha().is_finite() {
                return Err(Error::Config("LoRA alpha must be finite".into()));
            }
        }
        Ok(())
    }
}

/// Stand-alone adapted linear map, used for merging and for reasoning about a
/// single projection outside the encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    pub base: Array2<f64>,
    pub down: Array2<f64>,
    pub up: Array2<f64>,
    pub alpha: f64,
}

impl LoraAdapter {
    pub fn new(base: Array2<f64>, down: Array2<f64>, up: Array2<f64>, alpha: f64) -> Result<Self> {
        let (n_out, n_in) = base.dim();
        let r = down.nrows();
        if r == 0 {
            return Err(Error::Config("LoRA rank must be at least 1, got 0".into()));
        }
        if down.ncols() != n_in {
            return Err(Error::shape("LoRA down matrix", &[r, n_in], down.shape()));
        }
        if up.dim() != (n_out, r) {
            return Err(Error::shape("LoRA up matrix", &[n_out, r], up.shape()));
        }
        Ok(Self { base, down, up, alpha })
    }

    /// Fresh adapter: `A` uniform in `±1/√N_in`, `B` zero.
    pub fn init<R: Rng + ?Sized>(base: Array2<f64>, rank: usize, alpha: f64, rng: &mut R) -> Result<Self> {
        let (n_out, n_in) = base.dim();
        let down = init_down(rank, n_in, rng).into_dimensionality().expect("2-D");
        Self::new(base, down, Array2::zeros((n_out, rank)), alpha)
    }

    pub fn rank(&self) -> usize {
        self.down.nrows()
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    pub fn forward(&self, x: &Array1<f64>) -> Result<Array1<f64>> {
        if x.len() != self.base.ncols() {
            return Err(Error::shape("LoRA input", &[self.base.ncols()], x.shape()));
        }
        Ok(self.base.dot(x) + self.up.dot(&self.down.dot(x)) * self.scaling())
    }

    /// `W₀ + (alpha/r)·B·A`.
    pub fn merge(&self) -> Array2<f64> {
        if self.up.iter().all(|&v| v == 0.0) {
            return self.base.clone();
        }
        &self.base + &(self.up.dot(&self.down) * self.scaling())
    }
}

fn init_down<R: Rng + ?Sized>(rank: usize, n_in: usize, rng: &mut R) -> crate::autograd::Tensor {
    params::uniform(&[rank, n_in], 1.0 / (n_in as f64).sqrt(), rng)
}

/// Adapter tensors registered in a [`ParamStore`] for one projection.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterParams {
    pub down: ParamId,
    pub up: ParamId,
    pub rank: usize,
    pub alpha: f64,
}

impl AdapterParams {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// `(alpha/r)·B·(A·x)` applied over the last axis of `x`.
    pub fn delta(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let a = tape.param(store, self.down);
        let b = tape.param(store, self.up);
        let h = tape.linear(x, a, None);
        let y = tape.linear(h, b, None);
        tape.scale(y, self.scaling())
    }
}

fn adapter_name(block: usize, p: Projection) -> String {
    format!("blocks.{block}.attn.lora_{}", p.short())
}

/// Apply `policy` to the encoder.
///
/// In LoRA mode every target projection of every block receives an adapter
/// in [`ParamGroup::Adapter`] and all base encoder tensors are frozen. In full
/// mode the encoder is made entirely trainable and no adapters are added.
pub fn inject_lora<R: Rng + ?Sized>(
    encoder: &mut VitEncoder,
    store: &mut ParamStore,
    policy: &FinetunePolicy,
    rng: &mut R,
) -> Result<()> {
    policy.validate()?;
    if policy.mode == FinetuneMode::Full {
        store.set_group_trainable(ParamGroup::Encoder, true);
        return Ok(());
    }
    let d = encoder.config.embed_dim;
    let alpha = policy.alpha();
    for (i, block) in encoder.blocks.iter_mut().enumerate() {
        for &p in &policy.lora_targets {
            if block.attn.adapters.contains_key(&p) {
                return Err(Error::Invalid(format!("{} already has an adapter", adapter_name(i, p))));
            }
            let name = adapter_name(i, p);
            let down = store.insert(format!("{name}.A"), init_down(policy.rank, d, rng), ParamGroup::Adapter);
            let up = store.insert(format!("{name}.B"), params::zeros(&[d, policy.rank]), ParamGroup::Adapter);
            block.attn.adapters.insert(
                p,
                AdapterParams {
                    down,
                    up,
                    rank: policy.rank,
                    alpha,
                },
            );
        }
    }
    store.set_group_trainable(ParamGroup::Encoder, false);
    Ok(())
}

/// Gradient-enabled scalars, split by encoder base, adapter and decoder.
pub fn count_trainable_params(store: &ParamStore) -> ParamCounts {
    store.trainable_counts()
}

/// Archive holding only the adapters: `{name}.A`, `{name}.B`, `{name}.alpha`
/// and `{name}.rank` for each wrapped projection.
pub fn save_adapters(encoder: &VitEncoder, store: &ParamStore) -> Archive {
    let mut archive = Archive::new();
    for (i, block) in encoder.blocks.iter().enumerate() {
        for (&p, a) in &block.attn.adapters {
            let name = adapter_name(i, p);
            archive.insert(format!("{name}.A"), store.get(a.down).value(), Dtype::F32);
            archive.insert(format!("{name}.B"), store.get(a.up).value(), Dtype::F32);
            archive.insert(format!("{name}.alpha"), &params::filled(&[1], a.alpha), Dtype::F64);
            archive.insert(format!("{name}.rank"), &params::filled(&[1], a.rank as f64), Dtype::I64);
        }
    }
    archive.metadata.insert("content".into(), "lora_adapters".into());
    archive
}

/// Install adapters from an archive written by [`save_adapters`], creating
/// them where absent and overwriting existing ones. Base weights are frozen.
/// Returns the number of projections loaded.
pub fn load_adapters(encoder: &mut VitEncoder, store: &mut ParamStore, archive: &Archive) -> Result<usize> {
    let d = encoder.config.embed_dim;
    let mut loaded = 0;
    for (i, block) in encoder.blocks.iter_mut().enumerate() {
        for p in Projection::ALL {
            let name = adapter_name(i, p);
            if archive.get(&format!("{name}.A")).is_none() {
                continue;
            }
            let down = archive.tensor(&format!("{name}.A"))?;
            let up = archive.tensor(&format!("{name}.B"))?;
            let alpha = archive.tensor(&format!("{name}.alpha"))?.iter().next().copied().unwrap_or(f64::NAN);
            let rank = archive.tensor(&format!("{name}.rank"))?.iter().next().copied().unwrap_or(0.0) as usize;
            if rank < 1 {
                return Err(Error::Config(format!("{name}: LoRA rank must be at least 1")));
            }
            if down.shape() != [rank, d] {
                return Err(Error::shape(format!("{name}.A"), &[rank, d], down.shape()));
            }
            if up.shape() != [d, rank] {
                return Err(Error::shape(format!("{name}.B"), &[d, rank], up.shape()));
            }
            match block.attn.adapters.get_mut(&p) {
                Some(existing) if existing.rank == rank => {
                    *store.get_mut(existing.down).value_mut() = down;
                    *store.get_mut(existing.up).value_mut() = up;
                    existing.alpha = alpha;
                }
                Some(existing) => {
                    return Err(Error::Config(format!(
                        "{name}: archive rank {rank} differs from injected rank {}",
                        existing.rank
                    )));
                }
                None => {
                    let down = store.insert(format!("{name}.A"), down, ParamGroup::Adapter);
                    let up = store.insert(format!("{name}.B"), up, ParamGroup::Adapter);
                    block.attn.adapters.insert(p, AdapterParams { down, up, rank, alpha });
                }
            }
            loaded += 1;
        }
    }
    if loaded > 0 {
        store.set_group_trainable(ParamGroup::Encoder, false);
    }
    Ok(loaded)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use ndarray::{array, ArrayD, IxDyn};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hand_case() {
        let a = LoraAdapter::new(Array2::zeros((2, 2)), array![[1.0, 0.0]], array![[1.0], [1.0]], 1.0).unwrap();
        assert_eq!(a.forward(&array![3.0, 5.0]).unwrap(), array![3.0, 3.0]);
        assert_eq!(a.merge(), array![[1.0, 0.0], [1.0, 0.0]]);
        let mut doubled = a.clone();
        doubled.alpha = 2.0;
        assert_eq!(doubled.forward(&array![3.0, 5.0]).unwrap(), array![6.0, 6.0]);
    }

    #[test]
    fn zero_up_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let base = Array2::from_shape_fn((4, 4), |_| rng.random_range(-1.0..1.0));
        let a = LoraAdapter::init(base.clone(), 2, 2.0, &mut rng).unwrap();
        assert_eq!(a.merge(), base);
        let x = array![0.3, -1.0, 2.0, 0.5];
        assert_eq!(a.forward(&x).unwrap(), base.dot(&x));
    }

    #[test]
    fn shape_errors() {
        assert!(LoraAdapter::new(Array2::zeros((2, 2)), Array2::zeros((0, 2)), Array2::zeros((2, 0)), 1.0).is_err());
        assert!(LoraAdapter::new(Array2::zeros((2, 3)), Array2::zeros((1, 2)), Array2::zeros((2, 1)), 1.0).is_err());
        let a = LoraAdapter::new(Array2::zeros((2, 2)), Array2::zeros((1, 2)), Array2::zeros((2, 1)), 1.0).unwrap();
        assert!(a.forward(&array![1.0]).is_err());
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let rand4 = |rng: &mut ChaCha8Rng, s: &[usize]| ArrayD::from_shape_fn(IxDyn(s), |_| rng.random_range(-1.0..1.0));
        let down = store.insert("A", rand4(&mut rng, &[2, 4]), ParamGroup::Adapter);
        let up = store.insert("B", rand4(&mut rng, &[4, 2]), ParamGroup::Adapter);
        let adapter = AdapterParams { down, up, rank: 2, alpha: 3.0 };
        let x = rand4(&mut rng, &[3, 4]);
        let target = rand4(&mut rng, &[3, 4]);
        let loss = |store: &ParamStore| {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let y = adapter.delta(&mut tape, store, xv);
            let t = tape.constant(target.clone());
            let e = tape.mul(y, t);
            let s = tape.sum(e);
            (tape.value(s).iter().next().copied().unwrap(), tape.backward(s))
        };
        let (_, grads) = loss(&store);
        for id in [down, up] {
            let g = grads.param(id).unwrap().clone();
            for k in 0..g.len() {
                let h = 1e-6;
                let mut plus = store.clone();
                plus.get_mut(id).value_mut().as_slice_mut().unwrap()[k] += h;
                let mut minus = store.clone();
                minus.get_mut(id).value_mut().as_slice_mut().unwrap()[k] -= h;
                let fd = (loss(&plus).0 - loss(&minus).0) / (2.0 * h);
                let an = g.as_slice().unwrap()[k];
                assert!((fd - an).abs() <= 1e-4 * an.abs().max(1e-3), "{fd} vs {an}");
            }
        }
    }

    #[test]
    fn injection_counts_and_freezing() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let mut enc = VitEncoder::new(&mut store, EncoderConfig::toy(2, 8, 2, vec![1, 2]), &mut rng).unwrap();
        assert!(inject_lora(&mut enc, &mut store, &FinetunePolicy::lora(0), &mut rng).is_err());
        let mut empty = FinetunePolicy::lora(2);
        empty.lora_targets.clear();
        assert!(inject_lora(&mut enc, &mut store, &empty, &mut rng).is_err());
        inject_lora(&mut enc, &mut store, &FinetunePolicy::lora(2), &mut rng).unwrap();
        let c = count_trainable_params(&store);
        assert_eq!(c.encoder, 0);
        assert_eq!(c.adapter, 2 * 3 * 2 * (8 * 2));
        assert_eq!(c.decoder, 0);
    }

    #[test]
    fn adapter_archive_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = EncoderConfig::toy(2, 8, 2, vec![1, 2]);
        let mut store = ParamStore::new();
        let mut enc = VitEncoder::new(&mut store, cfg.clone(), &mut rng).unwrap();
        inject_lora(&mut enc, &mut store, &FinetunePolicy::lora(2), &mut rng).unwrap();
        let up = enc.blocks[1].attn.adapters[&Projection::Value].up;
        store.get_mut(up).value_mut().fill(0.25);
        let archive = save_adapters(&enc, &store);
        assert_eq!(archive.len(), 2 * 3 * 4);

        let mut store2 = ParamStore::new();
        let mut enc2 = VitEncoder::new(&mut store2, cfg, &mut rng).unwrap();
        assert_eq!(load_adapters(&mut enc2, &mut store2, &archive).unwrap(), 6);
        let up2 = enc2.blocks[1].attn.adapters[&Projection::Value].up;
        assert!(store2.get(up2).value().iter().all(|&v| v == 0.25));
        assert_eq!(count_trainable_params(&store2).encoder, 0);
    }
}
