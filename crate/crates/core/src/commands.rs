//! The four pipeline commands behind the command-line front end.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::figures::{save_loss_curve, save_prediction_panel};
use crate::imaging::{load_grayscale, load_mask, save_mask_png, save_probability_png16, write_probability_csv};
use crate::inference::segment_image;
use crate::metrics::{evaluate_set, MetricsReport};
use crate::model::SegModel;
use crate::training::{
    discover_pairs, fine_tune, load_checkpoint, prepare_dataset, CheckpointManifest, FineTuneResult, PrepareSummary,
};

/// Exit code for an inference run where some inputs failed.
pub const PARTIAL_FAILURE_EXIT: i32 = 6;
pub const LOSS_CURVE_FILE: &str = "loss_curve.png";
pub const INFER_DIR: &str = "infer";
pub const INFER_SUMMARY_FILE: &str = "summary.csv";
pub const METRICS_FILE: &str = "metrics.csv";

/// Patchifies every configured source into the prepared directory.
pub fn cmd_prepare(config: &PipelineConfig) -> Result<PrepareSummary> {
    if config.dataset.sources.is_empty() {
        return Err(Error::Layout("config lists no [[dataset.sources]]".into()));
    }
    for src in &config.dataset.sources {
        if !src.images.is_dir() {
            return Err(Error::Layout(format!("{} is not a directory", src.images.display())));
        }
    }
    config.echo(&config.out)?;
    prepare_dataset(&config.dataset.sources, &config.dataset.options, &config.prepared_dir())
}

/// Fine-tunes on the prepared dataset (or a raw `images/` + `masks/`
/// directory) and writes the best checkpoint, history CSV and loss curve.
pub fn cmd_train(config: &PipelineConfig) -> Result<FineTuneResult> {
    let dataset = config.prepared_dir();
    if !dataset.is_dir() {
        return Err(Error::Layout(format!(
            "no prepared dataset at {}; run `prepare` first",
            dataset.display()
        )));
    }
    config.echo(&config.out)?;
    let result = fine_tune(
        &dataset,
        &config.dataset.options,
        &config.model,
        &config.train,
        &config.out,
    )?;
    save_loss_curve(&config.out.join(LOSS_CURVE_FILE), &result.state.history)?;
    Ok(result)
}

/// Outcome of one inference input.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InferRecord {
    pub name: String,
    pub height: usize,
    pub width: usize,
    pub patches: usize,
    pub foreground_fraction: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct InferReport {
    pub processed: Vec<InferRecord>,
    /// Inputs that could not be segmented, with the reason.
    pub failed: Vec<(PathBuf, String)>,
    pub output_dir: PathBuf,
}

impl InferReport {
    pub fn exit_code(&self) -> i32 {
        if self.failed.is_empty() {
            0
        } else {
            PARTIAL_FAILURE_EXIT
        }
    }
}

fn image_inputs(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    if !input.is_dir() {
        return Err(Error::Layout(format!("{} does not exist", input.display())));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(input)
        .map_err(|e| Error::io(input, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|x| x.to_str())
                    .is_some_and(|x| ["png", "tif", "tiff"].iter().any(|k| k.eq_ignore_ascii_case(x)))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Layout(format!("no images in {}", input.display())));
    }
    Ok(files)
}

/// Loads the checkpoint, checking it against the configured architecture.
pub fn load_for_inference(config: &PipelineConfig, checkpoint: &Path) -> Result<(SegModel, CheckpointManifest)> {
    if !checkpoint.is_dir() {
        return Err(Error::Layout(format!("no checkpoint at {}", checkpoint.display())));
    }
    let (model, _, manifest) = load_checkpoint(checkpoint, Some(&config.model))?;
    Ok((model, manifest))
}

fn infer_one(model: &SegModel, config: &PipelineConfig, path: &Path, out: &Path) -> Result<InferRecord> {
    let image = load_grayscale(path)?;
    let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string();
    let (mask, prob, patches) = segment_image(model, &image, &config.tiling)?;
    save_mask_png(out.join("masks").join(format!("{name}.png")), &mask)?;
    save_probability_png16(out.join("probability").join(format!("{name}.png")), &prob)?;
    write_probability_csv(out.join("probability").join(format!("{name}.csv")), &prob)?;
    save_prediction_panel(&out.join("panels").join(format!("{name}.png")), &image, &prob, &mask)?;
    let (height, width) = mask.shape();
    Ok(InferRecord {
        name,
        height,
        width,
        patches,
        foreground_fraction: mask.foreground_fraction(),
    })
}

/// Segments one image or every image in a directory. Per-file failures are
/// collected rather than aborting the run.
pub fn cmd_infer(config: &PipelineConfig, input: &Path, checkpoint: Option<&Path>) -> Result<InferReport> {
    let ckpt = checkpoint.map_or_else(|| config.checkpoint_dir(), Path::to_path_buf);
    let (model, _) = load_for_inference(config, &ckpt)?;
    let inputs = image_inputs(input)?;
    let out = config.out.join(INFER_DIR);
    for sub in ["masks", "probability", "panels"] {
        let d = out.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    config.echo(&out)?;
    let mut report = InferReport {
        output_dir: out.clone(),
        ..Default::default()
    };
    for path in inputs {
        match infer_one(&model, config, &path, &out) {
            Ok(rec) => report.processed.push(rec),
            Err(e @ (Error::Io { .. } | Error::Format { .. } | Error::Validation(_))) => {
                report.failed.push((path, e.to_string()))
            }
            Err(e) => return Err(e),
        }
    }
    let table = out.join(INFER_SUMMARY_FILE);
    let wrap = |e: csv::Error| Error::io(&table, std::io::Error::other(e));
    let mut w = csv::Writer::from_path(&table).map_err(wrap)?;
    for rec in &report.processed {
        w.serialize(rec).map_err(wrap)?;
    }
    w.flush().map_err(|e| Error::io(&table, e))?;
    Ok(report)
}

/// Scores filename-matched predicted masks against ground truth and writes
/// the report CSV under `out`.
pub fn cmd_evaluate(predictions: &Path, truths: &Path, out: &Path) -> Result<MetricsReport> {
    let pairs = discover_pairs(predictions, truths)?;
    let loaded = pairs
        .into_iter()
        .map(|(stem, p, t)| Ok((load_mask(&p)?, load_mask(&t)?, stem)))
        .collect::<Result<Vec<_>>>()?;
    let report = evaluate_set(&loaded)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    report.write_csv(out.join(METRICS_FILE))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{save_grayscale_png, BinaryMask, GrayscaleImage, Grid};
    use crate::synthetic::disk_field;

    #[test]
    fn evaluate_identical_sets_is_perfect() {
        let dir = tempfile::tempdir().unwrap();
        let (p, t) = (dir.path().join("p"), dir.path().join("t"));
        fs::create_dir_all(&p).unwrap();
        fs::create_dir_all(&t).unwrap();
        for i in 0..3 {
            let (_, m) = disk_field(40, 50, 2, 4.0, 8.0, i);
            save_mask_png(p.join(format!("a{i}.png")), &m).unwrap();
            save_mask_png(t.join(format!("a{i}.png")), &m).unwrap();
        }
        let r = cmd_evaluate(&p, &t, &dir.path().join("o")).unwrap();
        assert_eq!((r.iou, r.dice, r.mae), (1.0, 1.0, 0.0));
        assert_eq!(r.per_image.len(), 3);
        assert!(dir.path().join("o").join(METRICS_FILE).is_file());
    }

    #[test]
    fn evaluate_without_pairs_is_layout_error() {
        let dir = tempfile::tempdir().unwrap();
        let (p, t) = (dir.path().join("p"), dir.path().join("t"));
        fs::create_dir_all(&p).unwrap();
        fs::create_dir_all(&t).unwrap();
        save_mask_png(p.join("x.png"), &BinaryMask::zeros(3, 3)).unwrap();
        save_mask_png(t.join("y.png"), &BinaryMask::zeros(3, 3)).unwrap();
        assert!(matches!(cmd_evaluate(&p, &t, dir.path()), Err(Error::Layout(_))));
    }

    #[test]
    fn train_without_prepared_data_is_layout_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = PipelineConfig {
            out: dir.path().to_path_buf(),
            ..Default::default()
        };
        let err = cmd_train(&cfg).unwrap_err();
        assert!(matches!(err, Error::Layout(_)));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn infer_without_checkpoint_is_layout_error() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("i.png");
        save_grayscale_png(&img, &GrayscaleImage::new(Grid::filled(8, 8, 3u8)).unwrap()).unwrap();
        let cfg = PipelineConfig {
            out: dir.path().join("o"),
            ..Default::default()
        };
        assert!(matches!(cmd_infer(&cfg, &img, None), Err(Error::Layout(_))));
    }
}
