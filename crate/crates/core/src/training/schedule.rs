//! Training hyperparameters, plateau learning-rate schedule and early stopping.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Minimum decrease in validation loss that counts as an improvement.
pub const IMPROVEMENT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Fraction of records used for training.
    pub split_ratio: f64,
    pub seed: u64,
    pub scheduler_factor: f64,
    pub scheduler_patience: usize,
    pub early_stop_patience: usize,
    pub min_lr: f64,
    /// Outward jitter applied to training boxes, in pixels.
    pub box_jitter: usize,
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-5,
            batch_size: 8,
            max_epochs: 50,
            split_ratio: 0.8,
            seed: 0,
            scheduler_factor: 0.5,
            scheduler_patience: 3,
            early_stop_patience: 10,
            min_lr: 1e-7,
            box_jitter: 0,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return fail("split_ratio must lie in (0, 1)");
        }
        if !(self.scheduler_factor > 0.0 && self.scheduler_factor < 1.0) {
            return fail("scheduler_factor must lie in (0, 1)");
        }
        if self.scheduler_patience == 0 || self.early_stop_patience == 0 {
            return fail("patience values must be at least 1");
        }
        if self.learning_rate.is_nan()
            || self.learning_rate <= 0.0
            || self.min_lr.is_nan()
            || self.min_lr < 0.0
            || self.min_lr > self.learning_rate
        {
            return fail("need 0 <= min_lr <= learning_rate and learning_rate > 0");
        }
        if self.batch_size == 0 || self.workers == 0 || self.max_epochs == 0 {
            return fail("batch_size, workers and max_epochs must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Learning rate in effect during the epoch.
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingState {
    pub current_lr: f64,
    /// Infinite until the first validation pass; stored as JSON null.
    #[serde(deserialize_with = "null_as_infinity")]
    pub best_val_loss: f64,
    pub best_epoch: Option<usize>,
    pub epochs_since_improvement: usize,
    pub epochs_since_lr_drop: usize,
    pub history: Vec<EpochRecord>,
    pub best_checkpoint_path: Option<PathBuf>,
}

fn null_as_infinity<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
}

impl TrainingState {
    pub fn new(config: &TrainConfig) -> Self {
        TrainingState {
            current_lr: config.learning_rate,
            best_val_loss: f64::INFINITY,
            best_epoch: None,
            epochs_since_improvement: 0,
            epochs_since_lr_drop: 0,
            history: Vec::new(),
            best_checkpoint_path: None,
        }
    }

    /// Writes `epoch,train_loss,val_loss,lr` rows.
    pub fn write_history_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
        let wrap = |e: csv::Error| Error::io(path, std::io::Error::other(e));
        w.write_record(["epoch", "train_loss", "val_loss", "lr"])
            .map_err(wrap)?;
        for r in &self.history {
            w.write_record([
                r.epoch.to_string(),
                r.train_loss.to_string(),
                r.val_loss.to_string(),
                r.lr.to_string(),
            ])
            .map_err(wrap)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Outcome of one scheduler update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlateauOutcome {
    pub improved: bool,
    pub lr_dropped: bool,
}

/// Updates improvement bookkeeping and the learning rate after an epoch.
///
/// An improvement resets both counters. Otherwise both grow, and once the
/// drop counter reaches `scheduler_patience` the rate is multiplied by
/// `scheduler_factor` (floored at `min_lr`) and that counter restarts.
pub fn plateau_step(state: &mut TrainingState, val_loss: f64, config: &TrainConfig) -> PlateauOutcome {
    if val_loss < state.best_val_loss - IMPROVEMENT_TOLERANCE {
        state.best_val_loss = val_loss;
        state.epochs_since_improvement = 0;
        state.epochs_since_lr_drop = 0;
        return PlateauOutcome {
            improved: true,
            lr_dropped: false,
        };
    }
    state.epochs_since_improvement += 1;
    state.epochs_since_lr_drop += 1;
    let mut lr_dropped = false;
    if state.epochs_since_lr_drop >= config.scheduler_patience {
        let next = (state.current_lr * config.scheduler_factor).max(config.min_lr);
        lr_dropped = next != state.current_lr;
        state.current_lr = next;
        state.epochs_since_lr_drop = 0;
    }
    PlateauOutcome {
        improved: false,
        lr_dropped,
    }
}

pub fn early_stop(state: &TrainingState, patience: usize) -> bool {
    state.epochs_since_improvement >= patience
}
