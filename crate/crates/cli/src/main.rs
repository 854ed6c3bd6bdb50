use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use geofm_core::config::ExperimentConfig;
use geofm_core::experiment::{self, ComparisonReport};
use geofm_core::{Error, Result};

/// Segmentation of geophysical images with an adapted ViT-S/14 encoder.
#[derive(Parser, Debug)]
#[command(name = "geofm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Scan the raw data and write the dataset manifest.
    PrepareData {
        #[command(flatten)]
        common: Common,
        /// Fail unless split sizes equal the published counts.
        #[arg(long)]
        strict: bool,
        /// Manifest directory (default: <data_root>/<task>/manifest).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fine-tune and write checkpoints plus the metric log.
    Train {
        #[command(flatten)]
        common: Common,
        /// Resume from this `last.safetensors`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Output directory (default: paths.checkpoint_dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint on the test split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to score (default: <checkpoint_dir>/best.safetensors).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Output directory (default: paths.report_dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render PCA maps of encoder patch features.
    VisualizeFeatures {
        #[command(flatten)]
        common: Common,
        /// Fine-tuned checkpoint; the initial encoder is used when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Output directory (default: <report_dir>/features).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Number of test samples to render.
        #[arg(long, default_value_t = 4)]
        count: usize,
        /// Tapped encoder block to project (default: the last tap).
        #[arg(long)]
        layer: Option<usize>,
    },
    /// Collate evaluation directories into a comparison table.
    Report {
        /// Directories written by `evaluate`.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Where to write report.txt/.tsv/.json (default: report).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct Common {
    /// TOML experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Shipped preset such as `fault+mla` or `geobody+unet`.
    #[arg(long)]
    preset: Option<String>,
    /// Override the seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Force deterministic mode.
    #[arg(long)]
    deterministic: bool,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let base = self.preset.as_deref().map(ExperimentConfig::from_preset_name).transpose()?;
        let mut config = match (&self.config, base) {
            (Some(path), base) => ExperimentConfig::load_over(path, base)?,
            (None, Some(base)) => base,
            (None, None) => return Err(Error::Config("pass --config <file> or --preset <task+decoder>".into())),
        };
        config.apply_env();
        if let Some(seed) = self.seed {
            config.train.seed = seed;
        }
        if self.deterministic {
            config.deterministic = true;
        }
        config.validate()?;
        Ok(config)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::PrepareData { common, strict, out } => {
            let mut config = common.resolve()?;
            if out.is_some() {
                config.paths.manifest_dir = out;
            }
            let (manifest, dir) = experiment::prepare_data(&config, strict)?;
            let (train, test) = manifest.split_counts();
            println!(
                "{}: {train} train / {test} test samples, {} classes, target {}x{}; manifest in {}",
                manifest.task_name,
                manifest.class_count,
                manifest.target_size.0,
                manifest.target_size.1,
                dir.display()
            );
        }
        Command::Train { common, checkpoint, out } => {
            let config = common.resolve()?;
            config.validate_paths()?;
            let out = out.unwrap_or_else(|| config.paths.checkpoint_dir.clone());
            let (model, report) = experiment::build_model(&config)?;
            if let Some(r) = report {
                eprintln!(
                    "pretrained: {} matched, {} missing, {} ignored",
                    r.matched.len(),
                    r.missing.len(),
                    r.ignored.len()
                );
            }
            let counts = model.trainable_counts();
            eprintln!(
                "trainable parameters: encoder {}, adapters {}, decoder {}",
                counts.encoder, counts.adapter, counts.decoder
            );
            drop(model);
            let summary = experiment::train(&config, &out, checkpoint)?;
            match (summary.best_epoch, summary.best_miou) {
                (Some(e), Some(m)) => println!("best mIoU {m:.4} at epoch {e}; checkpoints in {}", out.display()),
                _ => println!("no completed epoch; checkpoints in {}", out.display()),
            }
        }
        Command::Evaluate { common, checkpoint, out } => {
            let config = common.resolve()?;
            let checkpoint = checkpoint.unwrap_or_else(|| experiment::default_checkpoint(&config));
            let out = out.unwrap_or_else(|| config.paths.report_dir.clone());
            let report = experiment::evaluate(&config, &checkpoint, &out)?;
            println!("mIoU {:.4}  mPA {:.4}  ({})", report.miou, report.mpa, out.display());
        }
        Command::VisualizeFeatures {
            common,
            checkpoint,
            out,
            count,
            layer,
        } => {
            let config = common.resolve()?;
            let out = out.unwrap_or_else(|| config.paths.report_dir.join("features"));
            let written = experiment::visualize_features(&config, checkpoint.as_deref(), &out, count, layer)?;
            for p in written {
                println!("{}", p.display());
            }
        }
        Command::Report { runs, out } => {
            let report = ComparisonReport::collate(&runs)?;
            let out = out.unwrap_or_else(|| Path::new("report").to_path_buf());
            report.write(&out)?;
            print!("{}", report.render_table());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::NonFiniteLoss(payload) = &e {
                if let Ok(v) = serde_json::from_str::<serde_json::Value>(payload) {
                    eprintln!("{}", serde_json::to_string_pretty(&v).unwrap_or_default());
                }
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
