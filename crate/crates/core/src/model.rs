//! Complete segmentation networks: encoder + decoder head, or the Unet.

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;

use crate::archive::{Archive, Dtype};
use crate::autograd::{Tape, Tensor, Var};
use crate::decoders::{Decoder, DecoderConfig, LogitMap};
use crate::encoder::{EncoderConfig, LoadReport, VitEncoder};
use crate::error::{Error, Result};
use crate::lora::{self, FinetunePolicy};
use crate::params::{ParamCounts, ParamId, ParamStore};
use crate::unet::{Unet, UnetConfig};

#[derive(Clone, Debug)]
pub enum Architecture {
    Foundation { encoder: VitEncoder, decoder: Decoder },
    Unet(Unet),
}

/// A network together with the parameters it owns.
#[derive(Clone, Debug)]
pub struct Segmenter {
    pub store: ParamStore,
    pub arch: Architecture,
}

impl Segmenter {
    /// Encoder with random weights, policy applied, and a fresh decoder.
    pub fn foundation<R: Rng + ?Sized>(
        encoder: EncoderConfig,
        decoder: DecoderConfig,
        policy: &FinetunePolicy,
        rng: &mut R,
    ) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut enc = VitEncoder::new(&mut store, encoder, rng)?;
        lora::inject_lora(&mut enc, &mut store, policy, rng)?;
        let dec = Decoder::new(&mut store, decoder, enc.config.embed_dim, rng)?;
        Ok(Self {
            store,
            arch: Architecture::Foundation { encoder: enc, decoder: dec },
        })
    }

    pub fn unet<R: Rng + ?Sized>(config: UnetConfig, rng: &mut R) -> Result<Self> {
        let mut store = ParamStore::new();
        let unet = Unet::new(&mut store, config, rng)?;
        Ok(Self {
            store,
            arch: Architecture::Unet(unet),
        })
    }

    pub fn class_count(&self) -> usize {
        match &self.arch {
            Architecture::Foundation { decoder, .. } => decoder.config.class_count,
            Architecture::Unet(u) => u.config.class_count,
        }
    }

    pub fn encoder(&self) -> Option<&VitEncoder> {
        match &self.arch {
            Architecture::Foundation { encoder, .. } => Some(encoder),
            Architecture::Unet(_) => None,
        }
    }

    /// Copy pretrained encoder weights; a no-op report for the Unet.
    pub fn load_pretrained(&mut self, archive: &Archive) -> Result<LoadReport> {
        match &self.arch {
            Architecture::Foundation { encoder, .. } => encoder.load_pretrained_weights(&mut self.store, archive),
            Architecture::Unet(_) => Err(Error::Config("the Unet baseline has no pretrained encoder".into())),
        }
    }

    pub fn trainable_counts(&self) -> ParamCounts {
        self.store.trainable_counts()
    }

    pub fn total_counts(&self) -> ParamCounts {
        self.store.total_counts()
    }

    /// Logits `N × C × H × W` for standardized images `N × 3 × H × W`.
    pub fn forward(&self, tape: &mut Tape, images: Var) -> Result<Var> {
        match &self.arch {
            Architecture::Foundation { encoder, decoder } => {
                let s = tape.shape(images).to_vec();
                if s.len() != 4 {
                    return Err(Error::shape("model input", &[0, 3, 0, 0], &s));
                }
                let taps = encoder.forward_with_taps(tape, &self.store, images)?;
                decoder.forward(tape, &self.store, &taps, (s[2], s[3]))
            }
            Architecture::Unet(unet) => {
                let s = tape.shape(images).to_vec();
                if s.len() != 4 {
                    return Err(Error::shape("model input", &[0, 3, 0, 0], &s));
                }
                let m = unet.config.multiple();
                let (h, w) = (s[2], s[3]);
                let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
                if (ph, pw) == (h, w) {
                    return unet.forward(tape, &self.store, images);
                }
                // Edge-replicate up to the Unet lattice, then crop the logits.
                let padded = tape.resample(images, Arc::new(replicate_pad(h, ph)), Arc::new(replicate_pad(w, pw)));
                let logits = unet.forward(tape, &self.store, padded)?;
                let logits = tape.slice(logits, 2, 0, h);
                Ok(tape.slice(logits, 3, 0, w))
            }
        }
    }

    /// Inference on a batch of images.
    pub fn predict(&self, images: &Tensor) -> Result<Vec<LogitMap>> {
        let mut tape = Tape::inference();
        let x = tape.constant(images.clone());
        let y = self.forward(&mut tape, x)?;
        Ok(LogitMap::from_batch(tape.value(y)))
    }

    /// Names and values of the trainable tensors.
    pub fn trainable_tensors(&self) -> Vec<(ParamId, String, Tensor)> {
        self.store
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(id, p)| (id, p.name.clone(), p.value().clone()))
            .collect()
    }

    /// Archive of every trainable tensor at full precision.
    pub fn trainable_archive(&self) -> Archive {
        let mut a = Archive::new();
        for (_, name, value) in self.trainable_tensors() {
            a.insert(name, &value, Dtype::F64);
        }
        a
    }

    /// Overwrite parameters from `archive` by name. Every trainable tensor
    /// must be present; names unknown to the model are rejected.
    pub fn load_tensors(&mut self, archive: &Archive, prefix: &str) -> Result<usize> {
        let mut loaded = BTreeMap::new();
        for (name, stored) in archive.iter() {
            let Some(name) = name.strip_prefix(prefix) else { continue };
            let id = self
                .store
                .id(name)
                .ok_or_else(|| Error::Invalid(format!("checkpoint tensor `{name}` is not part of this model")))?;
            let p = self.store.get(id);
            if stored.shape != p.value().shape() {
                return Err(Error::shape(format!("checkpoint tensor `{name}`"), p.value().shape(), &stored.shape));
            }
            loaded.insert(id, stored.to_f64());
        }
        for (id, p) in self.store.iter() {
            if p.trainable && !loaded.contains_key(&id) {
                return Err(Error::MissingTensor(format!("{prefix}{}", p.name)));
            }
        }
        let n = loaded.len();
        for (id, v) in loaded {
            *self.store.get_mut(id).value_mut() = v;
        }
        Ok(n)
    }
}

/// `out × n` operator that copies row `i` for `i < n` and the last row beyond.
fn replicate_pad(n: usize, out: usize) -> Array2<f64> {
    let mut m = Array2::zeros((out, n));
    for i in 0..out {
        m[[i, i.min(n - 1)]] = 1.0;
    }
    m
}
