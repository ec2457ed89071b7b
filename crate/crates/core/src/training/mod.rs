//! Decoder fine-tuning: batching, the epoch loop, plateau scheduling, early
//! stopping and best-checkpoint retention.

mod checkpoint;
mod dataset;
mod loss;
mod optim;
mod parallel;
mod schedule;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use checkpoint::{
    checkpoint_config, load_checkpoint, save_checkpoint, CheckpointManifest, FORMAT_VERSION, MANIFEST_FILE,
    WEIGHTS_FILE,
};
pub use dataset::{
    discover_pairs, load_prepared, patchify_pair, prepare_dataset, split_dataset, split_indices, write_prepared,
    DataSource, PrepareOptions, PrepareSummary, SampleRecord, SourceTag, SAMPLES_FILE,
};
pub use loss::{dice_ce_loss, dice_ce_loss_grad, dice_ce_terms, LossTerms, DICE_EPS};
pub use optim::Adam;
pub use parallel::DataParallel;
pub use schedule::{
    early_stop, plateau_step, EpochRecord, PlateauOutcome, TrainConfig, TrainingState, IMPROVEMENT_TOLERANCE,
};

use crate::error::{Error, Result};
use crate::imaging::Grid;
use crate::model::{build_model, ImageEmbedding, ModelConfig, SegModel};
use crate::prompts::{bounding_box_from_mask, BoundingBox};

/// Subdirectory of the run output that holds the best checkpoint.
pub const BEST_CHECKPOINT_DIR: &str = "best";
pub const HISTORY_FILE: &str = "history.csv";

#[derive(Debug, Clone)]
pub struct BatchItem<'a> {
    pub record: &'a SampleRecord,
    pub bbox: BoundingBox,
    /// Precomputed encoder output; recomputed when absent.
    pub embedding: Option<ImageEmbedding>,
}

#[derive(Debug, Clone, Default)]
pub struct Batch<'a> {
    pub items: Vec<BatchItem<'a>>,
}

impl<'a> Batch<'a> {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Up to `k` contiguous, non-empty shards.
    pub fn shards(&self, k: usize) -> Vec<Batch<'a>> {
        let size = self.items.len().div_ceil(k.max(1)).max(1);
        self.items.chunks(size).map(|c| Batch { items: c.to_vec() }).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    Train,
    Validate,
}

/// Groups `order` into batches. With `jitter > 0` each box is re-derived
/// from its mask with a seeded outward jitter.
pub fn make_batches<'a>(
    records: &'a [SampleRecord],
    order: &[usize],
    batch_size: usize,
    cache: Option<&[ImageEmbedding]>,
    jitter: usize,
    seed: u64,
) -> Result<Vec<Batch<'a>>> {
    let mut out = Vec::new();
    for chunk in order.chunks(batch_size.max(1)) {
        let mut items = Vec::with_capacity(chunk.len());
        for &i in chunk {
            let record = &records[i];
            let bbox = if jitter > 0 {
                bounding_box_from_mask(
                    &record.mask,
                    jitter,
                    seed.wrapping_mul(1_000_003).wrapping_add(i as u64),
                )?
            } else {
                record.bbox
            };
            items.push(BatchItem {
                record,
                bbox,
                embedding: cache.map(|c| c[i].clone()),
            });
        }
        out.push(Batch { items });
    }
    Ok(out)
}

fn forward_logits(model: &SegModel, batch: &Batch) -> Result<crate::tensor::Tensor> {
    let missing: Vec<Grid<f64>> = batch
        .items
        .iter()
        .filter(|it| it.embedding.is_none())
        .map(|it| it.record.image.clone())
        .collect();
    let mut fresh = model.encode_images(&missing)?.into_iter();
    let embeddings: Vec<ImageEmbedding> = batch
        .items
        .iter()
        .map(|it| match &it.embedding {
            Some(e) => e.clone(),
            None => fresh.next().expect("one embedding per missing item"),
        })
        .collect();
    let prompts = batch
        .items
        .iter()
        .map(|it| model.encode_prompt(&it.bbox))
        .collect::<Result<Vec<_>>>()?;
    model.decode_batch(
        &embeddings.iter().collect::<Vec<_>>(),
        &prompts.iter().collect::<Vec<_>>(),
    )
}

fn check_finite(loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence(format!("loss became {loss}")))
    }
}

/// Mean loss over the batch without building gradients.
pub fn batch_loss(model: &SegModel, batch: &Batch) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::validation("empty batch"));
    }
    let logits = forward_logits(model, batch)?;
    let per = logits.numel() / batch.len();
    let mut total = 0.0;
    for (i, it) in batch.items.iter().enumerate() {
        total += dice_ce_loss(&logits.data()[i * per..(i + 1) * per], &it.record.mask)?;
    }
    let loss = total / batch.len() as f64;
    check_finite(loss)?;
    Ok(loss)
}

/// Mean loss over the batch and its gradient for every trainable tensor
/// that the loss depends on, keyed by parameter name.
pub fn batch_gradients(model: &SegModel, batch: &Batch) -> Result<(f64, BTreeMap<String, Vec<f64>>)> {
    if batch.is_empty() {
        return Err(Error::validation("empty batch"));
    }
    let logits = forward_logits(model, batch)?;
    let b = batch.len();
    let per = logits.numel() / b;
    let mut seed = Vec::with_capacity(logits.numel());
    let mut total = 0.0;
    for (i, it) in batch.items.iter().enumerate() {
        let (l, g) = dice_ce_loss_grad(&logits.data()[i * per..(i + 1) * per], &it.record.mask)?;
        total += l;
        seed.extend(g.into_iter().map(|v| v / b as f64));
    }
    let loss = total / b as f64;
    check_finite(loss)?;
    let grads = logits.backward(&seed);
    let mut out = BTreeMap::new();
    for (name, p) in model.params().iter() {
        if !p.trainable() {
            continue;
        }
        if let Some(g) = grads.get(p.tensor()) {
            out.insert(name.to_string(), g.to_vec());
        }
    }
    Ok((loss, out))
}

/// Runs every batch once. Training steps Adam after each batch (through
/// `parallel` when given); validation touches no weights or optimizer state.
/// Returns the mean of the per-batch losses.
pub fn run_epoch(
    model: &mut SegModel,
    batches: &[Batch],
    optimizer: &mut Adam,
    lr: f64,
    mode: RunMode,
    mut parallel: Option<&mut DataParallel>,
) -> Result<f64> {
    if batches.is_empty() {
        return Err(Error::validation("no batches to run"));
    }
    let mut sum = 0.0;
    for batch in batches {
        let loss = match mode {
            RunMode::Validate => batch_loss(model, batch)?,
            RunMode::Train => match parallel.as_deref_mut() {
                Some(dp) if dp.workers() > 1 => dp.step(model, batch, optimizer, lr)?,
                _ => {
                    let (loss, grads) = batch_gradients(model, batch)?;
                    optimizer.step(model.params_mut(), &grads, lr);
                    loss
                }
            },
        };
        sum += loss;
    }
    Ok(sum / batches.len() as f64)
}

/// Encoder outputs for every record, batched and computed in parallel.
pub fn embed_records(model: &SegModel, records: &[SampleRecord]) -> Result<Vec<ImageEmbedding>> {
    let chunks: Vec<Result<Vec<ImageEmbedding>>> = records
        .par_chunks(8)
        .map(|c| {
            let grids: Vec<Grid<f64>> = c.iter().map(|r| r.image.clone()).collect();
            Ok(model.encode_images(&grids)?.into_iter().map(|e| e.detach()).collect())
        })
        .collect();
    let mut out = Vec::with_capacity(records.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct FineTuneResult {
    pub state: TrainingState,
    pub best_checkpoint: PathBuf,
    /// Weights restored from the best checkpoint.
    pub best_model: SegModel,
    pub train: Vec<SampleRecord>,
    pub val: Vec<SampleRecord>,
}

/// Fine-tunes from a prepared dataset directory, or from a raw
/// `images/` + `masks/` directory patchified with `prepare`.
pub fn fine_tune(
    dataset: &Path,
    prepare: &PrepareOptions,
    model_config: &ModelConfig,
    config: &TrainConfig,
    out: &Path,
) -> Result<FineTuneResult> {
    let records = if dataset.join(SAMPLES_FILE).is_file() {
        load_prepared(dataset)?
    } else if dataset.join("images").is_dir() {
        let source = DataSource {
            images: dataset.join("images"),
            masks: Some(dataset.join("masks")),
            tag: SourceTag::Ct,
        };
        let staging = out.join("prepared");
        prepare_dataset(&[source], prepare, &staging)?;
        load_prepared(&staging)?
    } else {
        return Err(Error::Layout(format!(
            "{} holds neither a prepared dataset nor images/ and masks/",
            dataset.display()
        )));
    };
    fine_tune_records(records, model_config, config, out)
}

/// The epoch loop over in-memory records. Writes the best checkpoint under
/// `out/best` and the history CSV to `out/history.csv`.
pub fn fine_tune_records(
    records: Vec<SampleRecord>,
    model_config: &ModelConfig,
    config: &TrainConfig,
    out: &Path,
) -> Result<FineTuneResult> {
    config.validate()?;
    if records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut model = build_model(model_config)?;
    model.freeze_encoders();
    let (train, val) = split_dataset(records, config.split_ratio, config.seed)?;

    let frozen = model.encoders_frozen();
    let train_cache = if frozen {
        Some(embed_records(&model, &train)?)
    } else {
        None
    };
    let val_cache = if frozen {
        Some(embed_records(&model, &val)?)
    } else {
        None
    };
    let val_order: Vec<usize> = (0..val.len()).collect();
    let val_batches = make_batches(&val, &val_order, config.batch_size, val_cache.as_deref(), 0, 0)?;

    let mut state = TrainingState::new(config);
    let mut adam = Adam::new();
    let mut dp = if config.workers > 1 {
        Some(DataParallel::setup(&model, config.workers)?)
    } else {
        None
    };
    let best_dir = out.join(BEST_CHECKPOINT_DIR);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=config.max_epochs {
        let lr = state.current_lr;
        order.shuffle(&mut rng);
        let batch_seed = config.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let train_batches = make_batches(
            &train,
            &order,
            config.batch_size,
            train_cache.as_deref(),
            config.box_jitter,
            batch_seed,
        )?;
        let train_loss = run_epoch(&mut model, &train_batches, &mut adam, lr, RunMode::Train, dp.as_mut())?;
        let val_loss = run_epoch(&mut model, &val_batches, &mut adam, lr, RunMode::Validate, None)?;
        state.history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr,
        });
        let outcome = plateau_step(&mut state, val_loss, config);
        if outcome.improved {
            state.best_epoch = Some(epoch);
            state.best_checkpoint_path = Some(best_dir.clone());
            save_checkpoint(&model, &state, epoch, &best_dir)?;
        }
        if early_stop(&state, config.early_stop_patience) {
            break;
        }
    }
    if let Some(dp) = dp {
        dp.teardown();
    }
    state.write_history_csv(&out.join(HISTORY_FILE))?;
    let (best_model, _, _) = load_checkpoint(&best_dir, Some(model_config))?;
    Ok(FineTuneResult {
        state,
        best_checkpoint: best_dir,
        best_model,
        train,
        val,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::BinaryMask;
    use crate::model::ModelConfig;

    fn disk_record(i: usize) -> SampleRecord {
        let (cy, cx, r) = (100.0 + 7.0 * i as f64, 120.0, 50.0);
        let inside = |y: usize, x: usize| ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt() <= r;
        let image = Grid::from_fn(256, 256, |y, x| if inside(y, x) { 0.8 } else { 0.2 });
        let mask = BinaryMask::new(Grid::from_fn(256, 256, |y, x| u8::from(inside(y, x)))).unwrap();
        let bbox = bounding_box_from_mask(&mask, 0, 0).unwrap();
        SampleRecord::new(format!("d{i}"), image, mask, bbox, SourceTag::Ct).unwrap()
    }

    #[test]
    fn validation_is_read_only_and_mean_of_batches() {
        let mut model = build_model(&ModelConfig::toy()).unwrap();
        model.freeze_encoders();
        let recs: Vec<_> = (0..3).map(disk_record).collect();
        let batches = make_batches(&recs, &[0, 1, 2], 2, None, 0, 0).unwrap();
        let before = model.params().snapshot();
        let mut adam = Adam::new();
        let mean = run_epoch(&mut model, &batches, &mut adam, 1e-3, RunMode::Validate, None).unwrap();
        assert_eq!(before, model.params().snapshot());
        assert_eq!(adam, Adam::new());
        let direct = (batch_loss(&model, &batches[0]).unwrap() + batch_loss(&model, &batches[1]).unwrap()) / 2.0;
        assert!((mean - direct).abs() < 1e-12);
    }

    #[test]
    fn single_step_descends() {
        let mut model = build_model(&ModelConfig::toy()).unwrap();
        model.freeze_encoders();
        let recs: Vec<_> = (0..2).map(disk_record).collect();
        let batches = make_batches(&recs, &[0, 1], 2, None, 0, 0).unwrap();
        let before = batch_loss(&model, &batches[0]).unwrap();
        let mut adam = Adam::new();
        run_epoch(&mut model, &batches, &mut adam, 1e-3, RunMode::Train, None).unwrap();
        let after = batch_loss(&model, &batches[0]).unwrap();
        assert!(after < before, "{after} >= {before}");
    }

    #[test]
    fn empty_inputs_rejected() {
        let mut model = build_model(&ModelConfig::toy()).unwrap();
        let mut adam = Adam::new();
        assert!(matches!(
            run_epoch(&mut model, &[], &mut adam, 1e-3, RunMode::Train, None),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn data_parallel_matches_single_worker_step() {
        let mut a = build_model(&ModelConfig::toy()).unwrap();
        a.freeze_encoders();
        let mut b = a.deep_clone();
        let recs: Vec<_> = (0..4).map(disk_record).collect();
        let batches = make_batches(&recs, &[0, 1, 2, 3], 4, None, 0, 0).unwrap();
        let (mut oa, mut ob) = (Adam::new(), Adam::new());
        run_epoch(&mut a, &batches, &mut oa, 1e-3, RunMode::Train, None).unwrap();
        let mut dp = DataParallel::setup(&b, 2).unwrap();
        run_epoch(&mut b, &batches, &mut ob, 1e-3, RunMode::Train, Some(&mut dp)).unwrap();
        assert!(dp.in_sync_with(&b));
        dp.teardown();
        for ((n, pa), (_, pb)) in a.params().iter().zip(b.params().iter()) {
            for (x, y) in pa.tensor().data().iter().zip(pb.tensor().data()) {
                assert!((x - y).abs() < 1e-9, "{n}");
            }
        }
    }
}
