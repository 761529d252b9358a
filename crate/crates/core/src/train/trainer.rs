use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, Dtype};
use crate::data::{Instance, Routine};
use crate::error::{Error, Result};
use crate::eval::{evaluate_model, EvalReport};
use crate::model::encoder::predict_eval;
use crate::model::{ModelConfig, ModelParams};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::scalar::Scalar;
use crate::tensor::Mode;
use crate::train::loss::compute_gradients;
use crate::vocab::Vocabulary;

pub const CHECKPOINT_FILE: &str = "best.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSettings {
    pub max_epochs: usize,
    /// Epochs without a validation mAP@1 improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Routines sampled per step; `None` means the instance batch size,
    /// capped at the number of routines.
    pub routine_batch: Option<usize>,
    pub checkpoint_dir: Option<PathBuf>,
    /// Print one progress line per epoch to standard error.
    pub verbose: bool,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            max_epochs: 100,
            patience: 5,
            seed: 0,
            routine_batch: None,
            checkpoint_dir: None,
            verbose: false,
        }
    }
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::Config("max_epochs and patience must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_map1: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_val_map1: f64,
    pub checkpoint: Option<PathBuf>,
}

impl TrainReport {
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_map1,seconds\n");
        for e in &self.epochs {
            writeln!(out, "{},{:.6},{:.6},{:.3}", e.epoch, e.train_loss, e.val_map1, e.seconds).unwrap();
        }
        out
    }

    pub fn loss_curve(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub report: TrainReport,
    /// Parameters from the best validation epoch.
    pub params: ModelParams<T>,
}

pub fn evaluate_params<T: Scalar>(
    name: &str,
    params: &ModelParams<T>,
    config: &ModelConfig,
    instances: &[Instance],
) -> Result<EvalReport> {
    evaluate_model(name, |inst| predict_eval(inst, params, config), instances)
}

/// Mini-batch Adam training with early stopping on validation mAP@1.
///
/// All randomness (initialization, shuffling, dropout, routine and negative
/// sampling) flows from one generator seeded with `settings.seed`.
pub fn train<T: Scalar>(
    train_set: &[Instance],
    val_set: &[Instance],
    routines: &[Routine],
    config: &ModelConfig,
    settings: &TrainSettings,
    vocab: Option<&Vocabulary>,
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    settings.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Config("training needs non-empty train and validation sets".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut params = ModelParams::<T>::init(config, &mut rng)?;
    let mut adam = AdamState::new(params.named_tensors().iter().map(|(_, m)| m.shape()));
    let adam_config = AdamConfig::new(config.lr, config.l2);
    let use_routines = config.regularizer_active() && !routines.is_empty();

    if let Some(dir) = &settings.checkpoint_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut records = Vec::new();
    let mut best: Option<(usize, f64, ModelParams<T>)> = None;
    let mut stale = 0;
    let mut step = 0usize;
    let mut batch = Vec::with_capacity(config.batch_size);
    let mut routine_batch = Vec::new();

    for epoch in 1..=settings.max_epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut steps = 0usize;
        for chunk in order.chunks(config.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| train_set[i].clone()));
            routine_batch.clear();
            if use_routines {
                let n = settings
                    .routine_batch
                    .unwrap_or(batch.len())
                    .min(routines.len());
                routine_batch.extend(
                    rand::seq::index::sample(&mut rng, routines.len(), n)
                        .into_iter()
                        .map(|i| routines[i].clone()),
                );
            }
            let (loss, grads) = compute_gradients(&batch, &routine_batch, &params, config, Mode::Train, &mut rng)
                .map_err(|e| match e {
                    Error::NonFiniteLoss { .. } => Error::NonFiniteLoss { step },
                    other => other,
                })?;
            let mut slots: Vec<_> = params.named_tensors_mut().into_iter().map(|(_, m)| m).collect();
            let grad_refs: Vec<_> = grads.named_tensors().into_iter().map(|(_, m)| m).collect();
            adam_step(&mut slots, &grad_refs, &mut adam, &adam_config)?;
            loss_sum += loss.total.to_f64_lossy();
            steps += 1;
            step += 1;
        }

        let val = evaluate_params("val", &params, config, val_set)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / steps.max(1) as f64,
            val_map1: val.map1,
            seconds: started.elapsed().as_secs_f64(),
        };
        if settings.verbose {
            eprintln!(
                "epoch {:>3}  loss {:.5}  val mAP@1 {:.4}  ({:.1}s)",
                record.epoch, record.train_loss, record.val_map1, record.seconds
            );
        }
        records.push(record);

        let improved = best.as_ref().is_none_or(|(_, v, _)| val.map1 > *v);
        if improved {
            if let Some(dir) = &settings.checkpoint_dir {
                checkpoint::save(&dir.join(CHECKPOINT_FILE), &params, config, vocab, Dtype::of::<T>())?;
            }
            best = Some((epoch, val.map1, params.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= settings.patience {
                break;
            }
        }
    }

    let (best_epoch, best_val_map1, best_params) = best.expect("at least one epoch runs");
    let report = TrainReport {
        epochs: records,
        best_epoch,
        best_val_map1,
        checkpoint: settings.checkpoint_dir.as_ref().map(|d| d.join(CHECKPOINT_FILE)),
    };
    if let Some(dir) = &settings.checkpoint_dir {
        let path = dir.join(METRICS_FILE);
        fs::write(&path, report.metrics_csv()).map_err(|e| Error::io(path, e))?;
    }
    Ok(TrainOutcome {
        report,
        params: best_params,
    })
}
