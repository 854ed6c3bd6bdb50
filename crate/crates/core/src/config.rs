//! Experiment configuration and the shipped per-task presets.
//!
//! A config file is TOML. It may name a `preset = "task+decoder"`; the preset
//! supplies every value and the rest of the file overrides individual keys.
//! Unknown keys are rejected at every level.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::TaskName;
use crate::decoders::{DecoderConfig, DecoderKind};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::lora::{FinetuneMode, FinetunePolicy};
use crate::training::TrainConfig;
use crate::unet::UnetConfig;

/// Network family: one of the four heads on the transformer, or the Unet.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchitectureKind {
    Linear,
    Pup,
    Mla,
    Dpt,
    Unet,
}

impl ArchitectureKind {
    pub const ALL: [ArchitectureKind; 5] = [
        ArchitectureKind::Unet,
        ArchitectureKind::Linear,
        ArchitectureKind::Pup,
        ArchitectureKind::Mla,
        ArchitectureKind::Dpt,
    ];

    pub fn decoder(self) -> Option<DecoderKind> {
        match self {
            ArchitectureKind::Linear => Some(DecoderKind::Linear),
            ArchitectureKind::Pup => Some(DecoderKind::Pup),
            ArchitectureKind::Mla => Some(DecoderKind::Mla),
            ArchitectureKind::Dpt => Some(DecoderKind::Dpt),
            ArchitectureKind::Unet => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self.decoder() {
            Some(d) => d.as_str(),
            None => "unet",
        }
    }

    /// Row label used in comparison tables.
    pub fn display_name(self) -> String {
        match self.decoder() {
            Some(d) => format!("DINOv2-{}", d.as_str().to_uppercase()),
            None => "Unet".into(),
        }
    }
}

impl FromStr for ArchitectureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("unet") {
            return Ok(ArchitectureKind::Unet);
        }
        Ok(match DecoderKind::from_str(s)? {
            DecoderKind::Linear => ArchitectureKind::Linear,
            DecoderKind::Pup => ArchitectureKind::Pup,
            DecoderKind::Mla => ArchitectureKind::Mla,
            DecoderKind::Dpt => ArchitectureKind::Dpt,
        })
    }
}

/// Fine-tuning mode chosen per task and decoder in the shipped presets.
pub fn preset_finetune_mode(task: TaskName, decoder: DecoderKind) -> FinetuneMode {
    use DecoderKind::*;
    use TaskName::*;
    match (task, decoder) {
        (Facies, Dpt) | (Fault, Dpt) | (Fault, Mla) => FinetuneMode::Lora,
        _ => FinetuneMode::Full,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub architecture: ArchitectureKind,
    /// Defaults to the task's class count.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_count: Option<usize>,
    #[serde(default = "default_width")]
    pub channel_width: usize,
    #[serde(default = "default_pup_stages")]
    pub pup_stages: usize,
    /// Named-tensor archive with encoder weights; random init when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrained: Option<PathBuf>,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub finetune: FinetunePolicy,
    #[serde(default)]
    pub unet: UnetSection,
}

fn default_width() -> usize {
    256
}

fn default_pup_stages() -> usize {
    4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UnetSection {
    pub depth: usize,
    pub base_channels: usize,
}

impl Default for UnetSection {
    fn default() -> Self {
        Self {
            depth: 4,
            base_channels: 24,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data_root: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub report_dir: PathBuf,
    /// Where `prepare-data` writes the manifest; `<data_root>/<task>/manifest`
    /// when unset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskName,
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub paths: Paths,
    #[serde(default)]
    pub deterministic: bool,
}

/// Environment variable that replaces `paths.data_root`.
pub const DATA_ROOT_ENV: &str = "GEOFM_DATA_ROOT";

impl ExperimentConfig {
    /// Shipped defaults for `task` with `architecture`.
    pub fn preset(task: TaskName, architecture: ArchitectureKind) -> Self {
        let mut finetune = FinetunePolicy::full();
        if let Some(d) = architecture.decoder() {
            finetune.mode = preset_finetune_mode(task, d);
        }
        let run = format!("{}_{}", task.as_str(), architecture.as_str());
        Self {
            task,
            model: ModelSection {
                architecture,
                class_count: None,
                channel_width: default_width(),
                pup_stages: default_pup_stages(),
                pretrained: None,
                encoder: EncoderConfig::vit_small(),
                finetune,
                unet: UnetSection::default(),
            },
            train: TrainConfig {
                batch_size: task.default_batch_size(),
                ..TrainConfig::default()
            },
            paths: Paths {
                data_root: PathBuf::from("data"),
                checkpoint_dir: PathBuf::from("runs").join(&run).join("checkpoints"),
                report_dir: PathBuf::from("runs").join(&run).join("report"),
                manifest_dir: None,
            },
            deterministic: true,
        }
    }

    /// Parse `"task+decoder"`, e.g. `fault+mla` or `geobody+unet`.
    pub fn from_preset_name(name: &str) -> Result<Self> {
        let (task, arch) = name
            .split_once('+')
            .ok_or_else(|| Error::Config(format!("preset `{name}` is not of the form task+decoder")))?;
        let task = TaskName::from_str(task).map_err(|e| Error::Config(format!("preset `{name}`: {e}")))?;
        Ok(Self::preset(task, ArchitectureKind::from_str(arch)?))
    }

    /// Parse a TOML document, applying a `preset` key first if present.
    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_over(text, None)
    }

    /// Like [`parse`](Self::parse), with `base` supplying the values when
    /// the document names no preset of its own.
    pub fn parse_over(text: &str, base: Option<Self>) -> Result<Self> {
        let mut doc: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let base = match doc.remove("preset") {
            Some(toml::Value::String(name)) => Some(Self::from_preset_name(&name)?),
            Some(other) => return Err(Error::Config(format!("preset must be a string, found {other}"))),
            None => base,
        };
        let merged = match base {
            Some(b) => {
                let mut base_table = toml::Table::try_from(&b).map_err(|e| Error::Config(e.to_string()))?;
                merge(&mut base_table, doc);
                base_table
            }
            None => doc,
        };
        let config: Self = merged.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::load_over(path, None)
    }

    pub fn load_over(path: &Path, base: Option<Self>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::io(path, e),
        })?;
        Self::parse_over(&text, base).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Replace the data root from the environment when set.
    pub fn apply_env(&mut self) {
        if let Some(root) = std::env::var_os(DATA_ROOT_ENV).filter(|v| !v.is_empty()) {
            self.paths.data_root = PathBuf::from(root);
        }
    }

    pub fn class_count(&self) -> usize {
        self.model.class_count.unwrap_or_else(|| self.task.reference_class_count())
    }

    pub fn decoder_config(&self) -> Option<DecoderConfig> {
        self.model.architecture.decoder().map(|kind| DecoderConfig {
            kind,
            class_count: self.class_count(),
            channel_width: self.model.channel_width,
            pup_stages: self.model.pup_stages,
        })
    }

    pub fn unet_config(&self) -> UnetConfig {
        UnetConfig {
            depth: self.model.unet.depth,
            base_channels: self.model.unet.base_channels,
            class_count: self.class_count(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        match self.decoder_config() {
            Some(d) => {
                d.validate()?;
                self.model.encoder.validate()?;
                self.model.finetune.validate()?;
                if d.kind.uses_all_taps() && self.model.encoder.tap_layers.len() < 4 {
                    return Err(Error::Config(format!(
                        "model.encoder.tap_layers: the {} decoder needs four taps",
                        d.kind
                    )));
                }
            }
            None => self.unet_config().validate()?,
        }
        Ok(())
    }

    pub fn manifest_dir(&self) -> PathBuf {
        self.paths
            .manifest_dir
            .clone()
            .unwrap_or_else(|| self.paths.data_root.join(self.task.as_str()).join("manifest"))
    }

    /// Check that the input locations the config names exist.
    pub fn validate_paths(&self) -> Result<()> {
        if !self.paths.data_root.is_dir() {
            return Err(Error::Config(format!(
                "paths.data_root: directory {} does not exist (set it in the config or via {DATA_ROOT_ENV})",
                self.paths.data_root.display()
            )));
        }
        if let Some(p) = &self.model.pretrained {
            if !p.is_file() {
                return Err(Error::Config(format!("model.pretrained: file {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    /// Short digest of everything that affects results (output locations and
    /// the data root are excluded).
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.paths = Paths::default();
        let json = serde_json::to_string(&c).expect("config serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }
}

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
