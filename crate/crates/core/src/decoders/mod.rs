//! Segmentation heads that turn encoder feature taps into per-pixel logits.
//!
//! | kind   | taps used | default parameters (384-wide encoder, 2 classes) |
//! |--------|-----------|--------------------------------------------------|
//! | linear | last      | 770                                              |
//! | pup    | last      | 978,018                                          |
//! | mla    | all four  | 10,431,618                                       |
//! | dpt    | all four  | 13,928,802                                       |
//!
//! Every head ends in a bilinear resize to the input resolution. Where a head
//! finishes with a 1×1 classifier, the classifier runs before the resize; the
//! two operations commute because each row of a bilinear operator sums to one.

mod dpt;
mod linear;
mod mla;
mod pup;

use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, Array3, ArrayView3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::encoder::FeatureTaps;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};

pub use dpt::DptDecoder;
pub use linear::LinearDecoder;
pub use mla::MlaDecoder;
pub use pup::PupDecoder;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    Linear,
    Pup,
    Mla,
    Dpt,
}

impl DecoderKind {
    pub const ALL: [DecoderKind; 4] = [DecoderKind::Linear, DecoderKind::Pup, DecoderKind::Mla, DecoderKind::Dpt];

    pub fn as_str(self) -> &'static str {
        match self {
            DecoderKind::Linear => "linear",
            DecoderKind::Pup => "pup",
            DecoderKind::Mla => "mla",
            DecoderKind::Dpt => "dpt",
        }
    }

    /// Multi-level heads consume four taps, the others only the last one.
    pub fn uses_all_taps(self) -> bool {
        matches!(self, DecoderKind::Mla | DecoderKind::Dpt)
    }
}

impl std::fmt::Display for DecoderKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DecoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "linear" => Ok(DecoderKind::Linear),
            "pup" => Ok(DecoderKind::Pup),
            "mla" => Ok(DecoderKind::Mla),
            "dpt" => Ok(DecoderKind::Dpt),
            other => Err(Error::Config(format!("unknown decoder `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub kind: DecoderKind,
    pub class_count: usize,
    #[serde(default = "default_width")]
    pub channel_width: usize,
    /// Number of conv + upsample stages in the PUP head.
    #[serde(default = "default_pup_stages")]
    pub pup_stages: usize,
}

fn default_width() -> usize {
    256
}

fn default_pup_stages() -> usize {
    4
}

impl DecoderConfig {
    pub fn new(kind: DecoderKind, class_count: usize) -> Self {
        Self {
            kind,
            class_count,
            channel_width: default_width(),
            pup_stages: default_pup_stages(),
        }
    }

    pub fn with_width(mut self, width: usize) -> Self {
        self.channel_width = width;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_count < 2 {
            return Err(Error::Config(format!("class_count must be at least 2, got {}", self.class_count)));
        }
        if self.channel_width < 1 {
            return Err(Error::Config("channel_width must be at least 1".into()));
        }
        if self.kind == DecoderKind::Pup && self.pup_stages < 1 {
            return Err(Error::Config("pup_stages must be at least 1".into()));
        }
        Ok(())
    }

    /// Sidecar written next to decoder checkpoints.
    pub fn write_sidecar(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read_sidecar(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::io(path, e),
        })?;
        serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })
    }
}

#[derive(Clone, Debug)]
enum Head {
    Linear(LinearDecoder),
    Pup(PupDecoder),
    Mla(MlaDecoder),
    Dpt(DptDecoder),
}

/// A constructed head plus the parameters it registered.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub config: DecoderConfig,
    head: Head,
    params: Vec<ParamId>,
}

impl Decoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: DecoderConfig, embed_dim: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let first = store.len();
        let head = match config.kind {
            DecoderKind::Linear => Head::Linear(LinearDecoder::new(store, embed_dim, &config, rng)),
            DecoderKind::Pup => Head::Pup(PupDecoder::new(store, embed_dim, &config, rng)),
            DecoderKind::Mla => Head::Mla(MlaDecoder::new(store, embed_dim, &config, rng)),
            DecoderKind::Dpt => Head::Dpt(DptDecoder::new(store, embed_dim, &config, rng)),
        };
        let params = (first..store.len()).map(ParamId).collect();
        Ok(Self { config, head, params })
    }

    pub fn parameter_ids(&self) -> &[ParamId] {
        &self.params
    }

    /// Logits `N × C × H × W` for an input of spatial size `out`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, taps: &FeatureTaps, out: (usize, usize)) -> Result<Var> {
        let last = taps.last().ok_or_else(|| Error::Invalid("no feature taps".into()))?;
        let need_all = |taps: &FeatureTaps| -> Result<[Var; 4]> {
            if taps.len() < 4 {
                return Err(Error::Invalid(format!(
                    "{} decoder needs four taps, got {}",
                    self.config.kind,
                    taps.len()
                )));
            }
            let g = &taps.grids;
            let k = g.len();
            Ok([g[k - 4], g[k - 3], g[k - 2], g[k - 1]])
        };
        Ok(match &self.head {
            Head::Linear(d) => d.forward(tape, store, last, out),
            Head::Pup(d) => d.forward(tape, store, last, out),
            Head::Mla(d) => d.forward(tape, store, need_all(taps)?, out),
            Head::Dpt(d) => d.forward(tape, store, need_all(taps)?, out),
        })
    }
}

/// Trainable scalars registered by `decoder`.
pub fn decoder_param_count(decoder: &Decoder, store: &ParamStore) -> usize {
    decoder
        .parameter_ids()
        .iter()
        .map(|&id| store.get(id))
        .filter(|p| p.trainable)
        .map(|p| p.len())
        .sum()
}

/// Per-pixel class scores and their argmax.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitMap {
    /// `C × H × W`.
    pub logits: Array3<f64>,
    pub prediction: Array2<usize>,
}

impl LogitMap {
    pub fn from_logits(logits: Array3<f64>) -> Self {
        let prediction = argmax_classes(logits.view());
        Self { logits, prediction }
    }

    /// Split a batched `N × C × H × W` tensor.
    pub fn from_batch(batch: &crate::autograd::Tensor) -> Vec<Self> {
        batch
            .axis_iter(Axis(0))
            .map(|l| Self::from_logits(l.to_owned().into_dimensionality().expect("C×H×W logits")))
            .collect()
    }

    pub fn class_count(&self) -> usize {
        self.logits.shape()[0]
    }
}

/// Argmax over the class axis; ties go to the lowest class index.
pub fn argmax_classes(logits: ArrayView3<'_, f64>) -> Array2<usize> {
    let (c, h, w) = logits.dim();
    Array2::from_shape_fn((h, w), |(i, j)| {
        let mut best = 0;
        for k in 1..c {
            if logits[[k, i, j]] > logits[[best, i, j]] {
                best = k;
            }
        }
        best
    })
}
