//! Weighted Dice loss, warmup + cosine schedule, AdamW and the epoch loop.
//!
//! Randomness in the loop (batch order and flips) is drawn from a generator
//! seeded by `(seed, epoch)` alone, so a run resumed from an epoch checkpoint
//! sees exactly the batches an uninterrupted run would.

mod loss;
mod optimizer;
mod schedule;

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use loss::{
    class_weights, weighted_dice_loss, weighted_dice_on_tape, weighted_dice_with_gradient, weights_from_counts,
    LossBreakdown, DICE_EPS,
};
pub use optimizer::AdamW;
pub use schedule::lr_at;

use crate::archive::Archive;
use crate::autograd::Tape;
use crate::dataset::{augment_flip, prefetch, Batch, ModelInput, SampleSource};
use crate::error::{Error, Result};
use crate::evaluation;
use crate::model::Segmenter;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub adam_eps: f64,
    pub batch_size: usize,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    /// Stop after this many epochs without a better validation mIoU; 0 disables.
    pub patience: usize,
    pub seed: u64,
    pub flip: bool,
    pub prefetch_depth: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-5,
            weight_decay: 0.01,
            betas: (0.9, 0.999),
            adam_eps: 1e-8,
            batch_size: 6,
            warmup_epochs: 10,
            total_epochs: 100,
            patience: 20,
            seed: 0,
            flip: true,
            prefetch_depth: 2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.warmup_epochs >= self.total_epochs {
            return Err(Error::Config(format!(
                "warmup_epochs ({}) must be smaller than total_epochs ({})",
                self.warmup_epochs, self.total_epochs
            )));
        }
        if !(self.base_lr.is_finite() && self.base_lr >= 0.0) {
            return Err(Error::Config(format!("base_lr {} is not a finite non-negative number", self.base_lr)));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(Error::Config(format!("betas {:?} must lie in [0, 1)", self.betas)));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, samples: usize) -> usize {
        samples.div_ceil(self.batch_size)
    }

    fn optimizer(&self) -> AdamW {
        AdamW::new(self.betas.0, self.betas.1, self.adam_eps, self.weight_decay)
    }
}

/// Batch order and flip coins for one epoch.
pub fn epoch_plan(seed: u64, epoch: usize, samples: usize) -> (Vec<usize>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut order: Vec<usize> = (0..samples).collect();
    order.shuffle(&mut rng);
    let coins = (0..samples).map(|_| rng.random::<f64>()).collect();
    (order, coins)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_miou: Option<f64>,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    /// Loss of every optimizer step run in this invocation.
    pub step_losses: Vec<f64>,
    pub epochs: Vec<EpochRecord>,
    pub best_miou: Option<f64>,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
    pub final_step: usize,
}

/// Where artifacts go and how the run is labelled.
#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub out_dir: Option<PathBuf>,
    pub config_hash: String,
    /// Continue from a `last` checkpoint.
    pub resume: Option<PathBuf>,
    /// Stop after this many completed epochs (for interrupted-run tests).
    pub stop_after_epoch: Option<usize>,
}

pub const LAST_CHECKPOINT: &str = "last.safetensors";
pub const BEST_CHECKPOINT: &str = "best.safetensors";
pub const METRIC_LOG: &str = "metrics.jsonl";

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
struct LoopState {
    epoch: usize,
    step: usize,
    best_miou: Option<f64>,
    best_epoch: Option<usize>,
    stale_epochs: usize,
}

/// Serialize trainable weights and optimizer state.
pub fn checkpoint_archive(model: &Segmenter, optim: &AdamW, meta: &[(&str, String)]) -> Archive {
    let mut a = Archive::new();
    for (_, name, value) in model.trainable_tensors() {
        a.insert(format!("model.{name}"), &value, crate::archive::Dtype::F64);
    }
    optim.save_into(&model.store, &mut a);
    for (k, v) in meta {
        a.metadata.insert((*k).to_string(), v.clone());
    }
    a
}

/// Restore the weights of a checkpoint written by [`run_training`].
pub fn load_checkpoint_weights(model: &mut Segmenter, archive: &Archive) -> Result<()> {
    model.load_tensors(archive, "model.").map(|_| ())
}

fn log_line(path: Option<&Path>, value: serde_json::Value) -> Result<()> {
    let Some(path) = path else { return Ok(()) };
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{value}").map_err(|e| Error::io(path, e))
}

/// Fine-tune `model` on `train`, selecting the best epoch by mIoU on `val`
/// (or on `train` when no validation split is given).
pub fn run_training(
    model: &mut Segmenter,
    train: &dyn SampleSource,
    val: Option<&dyn SampleSource>,
    config: &TrainConfig,
    options: &TrainOptions,
) -> Result<TrainingSummary> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Invalid("training split is empty".into()));
    }
    let out_dir = options.out_dir.as_deref();
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let log_path = out_dir.map(|d| d.join(METRIC_LOG));
    let mut optim = config.optimizer();
    let mut state = LoopState::default();
    if let Some(path) = &options.resume {
        let archive = Archive::read(path)?;
        load_checkpoint_weights(model, &archive)?;
        optim.load_from(&model.store, &archive)?;
        let raw = archive
            .metadata
            .get("loop_state")
            .ok_or_else(|| Error::Invalid(format!("{} lacks loop state", path.display())))?;
        state = serde_json::from_str(raw).map_err(|source| Error::Json { path: path.clone(), source })?;
    }

    let spe = config.steps_per_epoch(train.len());
    let mut summary = TrainingSummary::default();
    while state.epoch < config.total_epochs {
        let epoch = state.epoch;
        let (order, coins) = epoch_plan(config.seed, epoch, train.len());
        let mut epoch_loss = 0.0;
        let mut lr = 0.0;
        let mut batch_samples: Vec<(usize, ModelInput)> = Vec::with_capacity(config.batch_size);
        let mut step_error = None;
        let mut run_batch = |batch_samples: &mut Vec<(usize, ModelInput)>, state: &mut LoopState| -> Result<()> {
            lr = lr_at(state.step, spe, config);
            let (loss, parts) = train_step(model, &mut optim, batch_samples, lr)?;
            if !loss.is_finite() {
                let indices: Vec<usize> = batch_samples.iter().map(|(i, _)| *i).collect();
                let payload = serde_json::json!({
                    "epoch": epoch,
                    "step": state.step,
                    "batch_indices": indices,
                    "lr": lr,
                    "loss": loss.to_string(),
                    "components": parts,
                });
                return Err(Error::NonFiniteLoss(payload.to_string()));
            }
            log_line(
                log_path.as_deref(),
                serde_json::json!({"kind": "step", "epoch": epoch, "step": state.step, "lr": lr, "loss": loss}),
            )?;
            summary.step_losses.push(loss);
            epoch_loss += loss;
            state.step += 1;
            batch_samples.clear();
            Ok(())
        };
        prefetch(train, &order, config.prefetch_depth, |i, sample| {
            if step_error.is_some() {
                return Ok(());
            }
            let coin = coins[i];
            let sample = if config.flip { augment_flip(sample, coin) } else { sample };
            batch_samples.push((i, sample));
            if batch_samples.len() == config.batch_size {
                if let Err(e) = run_batch(&mut batch_samples, &mut state) {
                    step_error = Some(e);
                }
            }
            Ok(())
        })?;
        if let Some(e) = step_error {
            return Err(e);
        }
        if !batch_samples.is_empty() {
            run_batch(&mut batch_samples, &mut state)?;
        }
        let train_loss = epoch_loss / spe as f64;
        let select_on = val.unwrap_or(train);
        let miou = evaluation::evaluate_dataset(model, select_on, config.batch_size)?.miou;
        state.epoch += 1;
        let improved = state.best_miou.is_none_or(|b| miou > b);
        if improved {
            state.best_miou = Some(miou);
            state.best_epoch = Some(epoch);
            state.stale_epochs = 0;
        } else {
            state.stale_epochs += 1;
        }
        let record = EpochRecord {
            epoch,
            train_loss,
            val_miou: Some(miou),
            lr,
        };
        log_line(
            log_path.as_deref(),
            serde_json::json!({"kind": "epoch", "epoch": epoch, "step": state.step, "lr": lr,
                "loss": train_loss, "val_miou": miou}),
        )?;
        summary.epochs.push(record);
        if let Some(dir) = out_dir {
            let meta = [
                ("config_hash", options.config_hash.clone()),
                ("epoch", epoch.to_string()),
                ("val_miou", miou.to_string()),
                ("loop_state", serde_json::to_string(&state).expect("state serializes")),
            ];
            let archive = checkpoint_archive(model, &optim, &meta);
            archive.write(dir.join(LAST_CHECKPOINT))?;
            if improved {
                archive.write(dir.join(BEST_CHECKPOINT))?;
            }
        }
        if config.patience > 0 && state.stale_epochs >= config.patience {
            summary.stopped_early = true;
            break;
        }
        if options.stop_after_epoch.is_some_and(|e| state.epoch >= e) {
            break;
        }
    }
    summary.best_miou = state.best_miou;
    summary.best_epoch = state.best_epoch;
    summary.final_step = state.step;
    Ok(summary)
}

/// Forward, loss, backward and one optimizer update on a batch.
fn train_step(
    model: &mut Segmenter,
    optim: &mut AdamW,
    samples: &[(usize, ModelInput)],
    lr: f64,
) -> Result<(f64, Vec<LossBreakdown>)> {
    let owned: Vec<ModelInput> = samples.iter().map(|(_, s)| s.clone()).collect();
    let batch = Batch::from_samples(&owned)?;
    let mut tape = Tape::new();
    let x = tape.constant(batch.images);
    let logits = model.forward(&mut tape, x)?;
    let probs = tape.softmax(logits, 1);
    if tape.value(probs).iter().any(|v| !v.is_finite()) {
        return Ok((f64::NAN, Vec::new()));
    }
    let (loss, parts) = weighted_dice_on_tape(&mut tape, probs, &batch.labels, &batch.masks)?;
    let value = tape.value(loss).iter().next().copied().unwrap_or(f64::NAN);
    if !value.is_finite() {
        return Ok((value, parts));
    }
    let grads = tape.backward(loss);
    optim.apply(&mut model.store, &grads, lr);
    Ok((value, parts))
}
