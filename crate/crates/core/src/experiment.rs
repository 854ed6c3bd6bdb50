//! Orchestration behind the command-line verbs. Every verb writes a
//! `run.json` next to its artifacts recording the config hash and data root.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{s, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::Archive;
use crate::autograd::Tape;
use crate::config::{ArchitectureKind, ExperimentConfig};
use crate::dataset::{self, Batch, DatasetManifest, ManifestSource, SampleSource, Split, TaskName};
use crate::encoder::LoadReport;
use crate::error::{Error, Result};
use crate::evaluation::{self, MetricsReport};
use crate::feature_viz;
use crate::lora::FinetuneMode;
use crate::model::Segmenter;
use crate::training::{self, TrainOptions, TrainingSummary, BEST_CHECKPOINT, LAST_CHECKPOINT};

pub const RUN_RECORD: &str = "run.json";
pub const CONFIG_COPY: &str = "config.toml";

/// Provenance written next to every artifact set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    pub config_hash: String,
    pub task: TaskName,
    pub architecture: ArchitectureKind,
    pub finetune_mode: FinetuneMode,
    pub data_root: PathBuf,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

impl RunRecord {
    pub fn new(command: &str, config: &ExperimentConfig) -> Self {
        Self {
            command: command.into(),
            config_hash: config.hash(),
            task: config.task,
            architecture: config.model.architecture,
            finetune_mode: config.model.finetune.mode,
            data_root: config.paths.data_root.clone(),
            seed: config.train.seed,
            checkpoint: None,
        }
    }

    pub fn write(&self, dir: &Path, config: &ExperimentConfig) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RUN_RECORD);
        let text = serde_json::to_string_pretty(self).expect("record serializes");
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        let path = dir.join(CONFIG_COPY);
        std::fs::write(&path, config.to_toml()).map_err(|e| Error::io(&path, e))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(RUN_RECORD);
        let text = std::fs::read_to_string(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.clone()),
            _ => Error::io(&path, e),
        })?;
        serde_json::from_str(&text).map_err(|source| Error::Json { path, source })
    }
}

/// Build the network a config describes. Initialization is driven by the
/// config seed, so two calls give identical weights; pretrained encoder
/// weights are loaded when the config names them.
pub fn build_model(config: &ExperimentConfig) -> Result<(Segmenter, Option<LoadReport>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
    match config.decoder_config() {
        None => Ok((Segmenter::unet(config.unet_config(), &mut rng)?, None)),
        Some(dec) => {
            let mut model = Segmenter::foundation(config.model.encoder.clone(), dec, &config.model.finetune, &mut rng)?;
            let report = match &config.model.pretrained {
                Some(path) => {
                    if !path.is_file() {
                        return Err(Error::MissingFile(path.clone()));
                    }
                    Some(model.load_pretrained(&Archive::read(path)?)?)
                }
                None => None,
            };
            Ok((model, report))
        }
    }
}

/// Scan the raw data and write the manifest. With `strict`, split sizes must
/// equal the published counts.
pub fn prepare_data(config: &ExperimentConfig, strict: bool) -> Result<(DatasetManifest, PathBuf)> {
    config.validate_paths()?;
    let manifest = dataset::load_manifest(&config.paths.data_root, config.task)?;
    if strict {
        manifest.check_reference_counts()?;
    }
    let dir = config.manifest_dir();
    manifest.write(&dir)?;
    RunRecord::new("prepare-data", config).write(&dir, config)?;
    Ok((manifest, dir))
}

/// Read the manifest `prepare-data` wrote for this config.
pub fn read_manifest(config: &ExperimentConfig) -> Result<DatasetManifest> {
    let dir = config.manifest_dir();
    if !dir.join("manifest.jsonl").is_file() {
        return Err(Error::Prerequisite {
            what: "dataset manifest".into(),
            path: dir.join("manifest.jsonl"),
            hint: format!("run `geofm prepare-data` for task {} first", config.task),
        });
    }
    let manifest = DatasetManifest::read(&dir)?;
    if manifest.task_name != config.task {
        return Err(Error::Invalid(format!(
            "manifest in {} is for task {}, config is for {}",
            dir.display(),
            manifest.task_name,
            config.task
        )));
    }
    if manifest.class_count > config.class_count() {
        return Err(Error::Invalid(format!(
            "labels contain {} classes but the model predicts {}",
            manifest.class_count,
            config.class_count()
        )));
    }
    Ok(manifest)
}

/// Train on the manifest's train split, selecting on its test split, and
/// write checkpoints, the metric log and a run record into `out_dir`.
pub fn train(config: &ExperimentConfig, out_dir: &Path, resume: Option<PathBuf>) -> Result<TrainingSummary> {
    let manifest = read_manifest(config)?;
    if let Some(p) = &resume {
        if !p.is_file() {
            return Err(Error::Prerequisite {
                what: "checkpoint to resume from".into(),
                path: p.clone(),
                hint: "pass the `last.safetensors` of an earlier run".into(),
            });
        }
    }
    let (mut model, _) = build_model(config)?;
    let train_split = ManifestSource::new(manifest.clone(), Split::Train);
    let val_split = ManifestSource::new(manifest, Split::Test);
    let val: Option<&dyn SampleSource> = if val_split.is_empty() { None } else { Some(&val_split) };
    RunRecord::new("train", config).write(out_dir, config)?;
    let options = TrainOptions {
        out_dir: Some(out_dir.to_path_buf()),
        config_hash: config.hash(),
        resume,
        stop_after_epoch: None,
    };
    training::run_training(&mut model, &train_split, val, &config.train, &options)
}

/// Default checkpoint for evaluation and feature maps.
pub fn default_checkpoint(config: &ExperimentConfig) -> PathBuf {
    config.paths.checkpoint_dir.join(BEST_CHECKPOINT)
}

/// Build the model and overwrite its trainable tensors from `checkpoint`.
pub fn load_trained(config: &ExperimentConfig, checkpoint: &Path) -> Result<Segmenter> {
    if !checkpoint.is_file() {
        return Err(Error::Prerequisite {
            what: "checkpoint".into(),
            path: checkpoint.to_path_buf(),
            hint: format!(
                "run `geofm train` first or pass --checkpoint (training writes {BEST_CHECKPOINT} and {LAST_CHECKPOINT})"
            ),
        });
    }
    let archive = Archive::read(checkpoint)?;
    if let Some(hash) = archive.metadata.get("config_hash") {
        if *hash != config.hash() {
            return Err(Error::Config(format!(
                "checkpoint {} was produced by config {hash}, current config is {}",
                checkpoint.display(),
                config.hash()
            )));
        }
    }
    let (mut model, _) = build_model(config)?;
    training::load_checkpoint_weights(&mut model, &archive)?;
    Ok(model)
}

/// Score the test split and write the metrics report into `out_dir`.
pub fn evaluate(config: &ExperimentConfig, checkpoint: &Path, out_dir: &Path) -> Result<MetricsReport> {
    let model = load_trained(config, checkpoint)?;
    let manifest = read_manifest(config)?;
    let source = ManifestSource::new(manifest, Split::Test);
    let report = evaluation::evaluate_dataset(&model, &source, config.train.batch_size)?;
    report.write(out_dir)?;
    let mut record = RunRecord::new("evaluate", config);
    record.checkpoint = Some(checkpoint.to_path_buf());
    record.write(out_dir, config)?;
    Ok(report)
}

/// Render PCA maps of one tapped encoder block (the last tap by default) for
/// the first `count` test samples. Returns the written image paths.
pub fn visualize_features(
    config: &ExperimentConfig,
    checkpoint: Option<&Path>,
    out_dir: &Path,
    count: usize,
    layer: Option<usize>,
) -> Result<Vec<PathBuf>> {
    if config.model.architecture == ArchitectureKind::Unet {
        return Err(Error::Config("feature maps need a transformer encoder, not the Unet".into()));
    }
    let taps = &config.model.encoder.tap_layers;
    let tap = match layer {
        None => taps.len() - 1,
        Some(l) => taps.iter().position(|&t| t == l).ok_or_else(|| {
            Error::Config(format!("layer {l} is not among the tapped blocks {taps:?}"))
        })?,
    };
    let model = match checkpoint {
        Some(c) => load_trained(config, c)?,
        None => build_model(config)?.0,
    };
    let encoder = model.encoder().expect("foundation model");
    let source = ManifestSource::new(read_manifest(config)?, Split::Test);
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    let mut variance_rows = vec!["sample_id\tpc1\tpc2\tpc3".to_string()];
    for i in 0..count.min(source.len()) {
        let sample = source.sample(i)?;
        let batch = Batch::from_samples(std::slice::from_ref(&sample))?;
        let mut tape = Tape::inference();
        let x = tape.constant(batch.images);
        let taps = encoder.forward_with_taps(&mut tape, &model.store, x)?;
        let grid = taps.grid_values(&tape, tap);
        let grid = grid.index_axis(Axis(0), 0);
        let proj = feature_viz::pca_project_features(feature_viz::patch_matrix(grid).view(), 3)?;
        let rgb = feature_viz::render_rgb_map(&proj, taps.grid_shape, (sample.height(), sample.width()))?;
        let (vh, vw) = sample.valid_size();
        let rgb = rgb.slice(s![..vh, ..vw, ..]).to_owned();
        let id = source.sample_id(i);
        let path = out_dir.join(format!("features_{id}.png"));
        feature_viz::write_png(&path, &rgb)?;
        let ratios = proj.explained_variance_ratio();
        let mut row = id.clone();
        for r in &ratios {
            let _ = write!(row, "\t{r:.6}");
        }
        variance_rows.push(row);
        written.push(path);
    }
    let path = out_dir.join("explained_variance.tsv");
    std::fs::write(&path, variance_rows.join("\n") + "\n").map_err(|e| Error::io(&path, e))?;
    let mut record = RunRecord::new("visualize-features", config);
    record.checkpoint = checkpoint.map(Path::to_path_buf);
    record.write(out_dir, config)?;
    Ok(written)
}

/// One row of a comparison table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub task: TaskName,
    pub architecture: ArchitectureKind,
    pub finetune_mode: FinetuneMode,
    pub miou: f64,
    pub mpa: f64,
    pub config_hash: String,
}

/// Metrics of several evaluated runs, one row per model and one column pair
/// per task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub data_root: PathBuf,
    pub rows: Vec<ReportRow>,
}

impl ComparisonReport {
    /// Collate evaluation directories. All runs must share one data root and
    /// no (task, model) pair may appear twice.
    pub fn collate(run_dirs: &[PathBuf]) -> Result<Self> {
        if run_dirs.is_empty() {
            return Err(Error::Config("report needs at least one evaluation directory".into()));
        }
        let mut rows = Vec::new();
        let mut root: Option<PathBuf> = None;
        for dir in run_dirs {
            let record = RunRecord::read(dir).map_err(|e| missing_eval(dir, e))?;
            let metrics = MetricsReport::read(dir).map_err(|e| missing_eval(dir, e))?;
            match &root {
                None => root = Some(record.data_root.clone()),
                Some(r) if *r != record.data_root => {
                    return Err(Error::Config(format!(
                        "{} used data root {}, earlier runs used {}",
                        dir.display(),
                        record.data_root.display(),
                        r.display()
                    )))
                }
                Some(_) => {}
            }
            if rows
                .iter()
                .any(|r: &ReportRow| r.task == record.task && r.architecture == record.architecture)
            {
                return Err(Error::Config(format!(
                    "more than one run of {} on {}",
                    record.architecture.display_name(),
                    record.task
                )));
            }
            rows.push(ReportRow {
                task: record.task,
                architecture: record.architecture,
                finetune_mode: record.finetune_mode,
                miou: metrics.miou,
                mpa: metrics.mpa,
                config_hash: record.config_hash,
            });
        }
        let order = |a: ArchitectureKind| ArchitectureKind::ALL.iter().position(|&x| x == a);
        rows.sort_by_key(|r| (order(r.architecture), r.task));
        Ok(Self {
            data_root: root.expect("at least one run"),
            rows,
        })
    }

    fn tasks(&self) -> Vec<TaskName> {
        let mut t: Vec<TaskName> = self.rows.iter().map(|r| r.task).collect();
        t.sort();
        t.dedup();
        t
    }

    fn architectures(&self) -> Vec<ArchitectureKind> {
        let mut a: Vec<ArchitectureKind> = Vec::new();
        for r in &self.rows {
            if !a.contains(&r.architecture) {
                a.push(r.architecture);
            }
        }
        a
    }

    fn cell(&self, arch: ArchitectureKind, task: TaskName) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.architecture == arch && r.task == task)
    }

    /// Fixed-width text table: one row per model, mIoU and mPA per task.
    pub fn render_table(&self) -> String {
        let tasks = self.tasks();
        let mut header = vec!["Model".to_string()];
        for t in &tasks {
            header.push(format!("{t} mIoU"));
            header.push(format!("{t} mPA"));
        }
        let mut lines = vec![header];
        for arch in self.architectures() {
            let mut line = vec![arch.display_name()];
            for &t in &tasks {
                match self.cell(arch, t) {
                    Some(r) => {
                        line.push(format!("{:.4}", r.miou));
                        line.push(format!("{:.4}", r.mpa));
                    }
                    None => line.extend(["-".to_string(), "-".to_string()]),
                }
            }
            lines.push(line);
        }
        let widths: Vec<usize> = (0..lines[0].len())
            .map(|c| lines.iter().map(|l| l[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (i, line) in lines.iter().enumerate() {
            let cells: Vec<String> = line
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(c, (v, &w))| if c == 0 { format!("{v:<w$}") } else { format!("{v:>w$}") })
                .collect();
            out.push_str(cells.join("  ").trim_end());
            out.push('\n');
            if i == 0 {
                let rule: usize = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
                out.push_str(&"-".repeat(rule));
                out.push('\n');
            }
        }
        out
    }

    /// Long-format rows for plotting tools.
    pub fn render_tsv(&self) -> String {
        let mut out = String::from("task\tmodel\tfinetune\tmiou\tmpa\tconfig_hash\n");
        for r in &self.rows {
            let mode = match r.finetune_mode {
                FinetuneMode::Full => "full",
                FinetuneMode::Lora => "lora",
            };
            let _ = writeln!(
                out,
                "{}\t{}\t{mode}\t{:.6}\t{:.6}\t{}",
                r.task,
                r.architecture.as_str(),
                r.miou,
                r.mpa,
                r.config_hash
            );
        }
        out
    }

    /// `report.txt`, `report.tsv` and `report.json` in `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, text) in [
            ("report.txt", self.render_table()),
            ("report.tsv", self.render_tsv()),
            ("report.json", serde_json::to_string_pretty(self).expect("report serializes")),
        ] {
            let path = dir.join(name);
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

fn missing_eval(dir: &Path, e: Error) -> Error {
    match e {
        Error::MissingFile(path) => Error::Prerequisite {
            what: "evaluation output".into(),
            path,
            hint: format!("run `geofm evaluate --out {}` first", dir.display()),
        },
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::MetricsReport;

    fn fake_run(dir: &Path, arch: ArchitectureKind, root: &str, miou: f64) {
        let mut config = ExperimentConfig::preset(TaskName::Geobody, arch);
        config.paths.data_root = root.into();
        RunRecord::new("evaluate", &config).write(dir, &config).unwrap();
        MetricsReport {
            per_class_iou: vec![Some(miou), Some(miou)],
            miou,
            per_class_pa: vec![Some(0.9), Some(0.9)],
            mpa: 0.9,
            per_sample_miou: vec![],
            distance_profile: None,
        }
        .write(dir)
        .unwrap();
    }

    #[test]
    fn five_row_table() {
        let tmp = tempfile::tempdir().unwrap();
        let mut dirs = Vec::new();
        for (i, arch) in [
            ArchitectureKind::Dpt,
            ArchitectureKind::Linear,
            ArchitectureKind::Unet,
            ArchitectureKind::Mla,
            ArchitectureKind::Pup,
        ]
        .into_iter()
        .enumerate()
        {
            let d = tmp.path().join(arch.as_str());
            fake_run(&d, arch, "data", 0.8 + i as f64 * 0.01);
            dirs.push(d);
        }
        let report = ComparisonReport::collate(&dirs).unwrap();
        let table = report.render_table();
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 7, "{table}");
        assert!(lines[0].contains("geobody mIoU") && lines[0].contains("geobody mPA"));
        assert!(lines[2].starts_with("Unet"));
        assert!(lines[6].starts_with("DINOv2-DPT"));
        assert_eq!(report.render_tsv().lines().count(), 6);
    }

    #[test]
    fn mixed_roots_are_refused() {
        let tmp = tempfile::tempdir().unwrap();
        let a = tmp.path().join("a");
        let b = tmp.path().join("b");
        fake_run(&a, ArchitectureKind::Unet, "data", 0.8);
        fake_run(&b, ArchitectureKind::Pup, "elsewhere", 0.8);
        let err = ComparisonReport::collate(&[a, b]).unwrap_err();
        assert!(err.to_string().contains("data root"), "{err}");
    }

    #[test]
    fn missing_checkpoint_names_path() {
        let config = ExperimentConfig::preset(TaskName::Fault, ArchitectureKind::Linear);
        let path = PathBuf::from("nowhere/best.safetensors");
        let err = load_trained(&config, &path).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("nowhere/best.safetensors"));
    }
}
