//! Overlap and error metrics between a predicted mask `P` and ground truth `T`.

use std::io::Write;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::imaging::BinaryMask;

struct Counts {
    intersection: usize,
    union: usize,
    predicted: usize,
    truth: usize,
    differing: usize,
    total: usize,
}

fn counts(p: &BinaryMask, t: &BinaryMask) -> Result<Counts> {
    if p.shape() != t.shape() {
        return Err(Error::validation(format!(
            "prediction is {:?} but truth is {:?}",
            p.shape(),
            t.shape()
        )));
    }
    let mut c = Counts {
        intersection: 0,
        union: 0,
        predicted: 0,
        truth: 0,
        differing: 0,
        total: p.values().len(),
    };
    for (&a, &b) in p.values().iter().zip(t.values()) {
        c.intersection += usize::from(a & b);
        c.union += usize::from(a | b);
        c.predicted += usize::from(a);
        c.truth += usize::from(b);
        c.differing += usize::from(a ^ b);
    }
    Ok(c)
}

/// `|P ∩ T| / |P ∪ T|`; two empty masks score 1.
pub fn iou(p: &BinaryMask, t: &BinaryMask) -> Result<f64> {
    let c = counts(p, t)?;
    Ok(if c.union == 0 {
        1.0
    } else {
        c.intersection as f64 / c.union as f64
    })
}

/// `2 |P ∩ T| / (|P| + |T|)`; two empty masks score 1.
pub fn dice(p: &BinaryMask, t: &BinaryMask) -> Result<f64> {
    let c = counts(p, t)?;
    let denom = c.predicted + c.truth;
    Ok(if denom == 0 {
        1.0
    } else {
        2.0 * c.intersection as f64 / denom as f64
    })
}

/// Mean of `|P_i - T_i|` over all pixels.
pub fn mae(p: &BinaryMask, t: &BinaryMask) -> Result<f64> {
    let c = counts(p, t)?;
    Ok(c.differing as f64 / c.total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImageMetrics {
    pub name: String,
    pub iou: f64,
    pub dice: f64,
    pub mae: f64,
    pub n_pixels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    /// Unweighted means over images.
    pub iou: f64,
    pub dice: f64,
    pub mae: f64,
    pub n_pixels: usize,
    /// Metrics over all pixels pooled as one mask pair.
    pub pooled_iou: f64,
    pub pooled_dice: f64,
    pub pooled_mae: f64,
    pub per_image: Vec<ImageMetrics>,
}

/// Per-image metrics plus their unweighted means (and pooled-pixel figures).
pub fn evaluate_set(pairs: &[(BinaryMask, BinaryMask, String)]) -> Result<MetricsReport> {
    if pairs.is_empty() {
        return Err(Error::validation("no mask pairs to evaluate"));
    }
    let mut per_image = Vec::with_capacity(pairs.len());
    let (mut inter, mut uni, mut sum_pt, mut diff, mut total) = (0usize, 0usize, 0usize, 0usize, 0usize);
    for (p, t, name) in pairs {
        let c = counts(p, t)?;
        inter += c.intersection;
        uni += c.union;
        sum_pt += c.predicted + c.truth;
        diff += c.differing;
        total += c.total;
        per_image.push(ImageMetrics {
            name: name.clone(),
            iou: iou(p, t)?,
            dice: dice(p, t)?,
            mae: mae(p, t)?,
            n_pixels: c.total,
        });
    }
    let n = per_image.len() as f64;
    let mean = |f: fn(&ImageMetrics) -> f64| per_image.iter().map(f).sum::<f64>() / n;
    Ok(MetricsReport {
        iou: mean(|m| m.iou),
        dice: mean(|m| m.dice),
        mae: mean(|m| m.mae),
        n_pixels: total,
        pooled_iou: if uni == 0 { 1.0 } else { inter as f64 / uni as f64 },
        pooled_dice: if sum_pt == 0 {
            1.0
        } else {
            2.0 * inter as f64 / sum_pt as f64
        },
        pooled_mae: diff as f64 / total as f64,
        per_image,
    })
}

impl MetricsReport {
    /// Per-image rows followed by a `mean` row and a `pooled` row.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        w.write_record(["name", "iou", "dice", "mae", "n_pixels"])
            .map_err(|e| csv_err(path, e))?;
        for m in &self.per_image {
            w.write_record([
                m.name.clone(),
                m.iou.to_string(),
                m.dice.to_string(),
                m.mae.to_string(),
                m.n_pixels.to_string(),
            ])
            .map_err(|e| csv_err(path, e))?;
        }
        for (label, iou, dice, mae) in [
            ("mean", self.iou, self.dice, self.mae),
            ("pooled", self.pooled_iou, self.pooled_dice, self.pooled_mae),
        ] {
            w.write_record([
                label.to_string(),
                iou.to_string(),
                dice.to_string(),
                mae.to_string(),
                self.n_pixels.to_string(),
            ])
            .map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_table(&self, out: &mut impl Write) -> std::io::Result<()> {
        let width = self.per_image.iter().map(|m| m.name.len()).max().unwrap_or(4).max(6);
        writeln!(out, "{:<width$}  {:>8}  {:>8}  {:>8}", "image", "IoU", "Dice", "MAE")?;
        for m in &self.per_image {
            writeln!(
                out,
                "{:<width$}  {:>8.4}  {:>8.4}  {:>8.4}",
                m.name, m.iou, m.dice, m.mae
            )?;
        }
        writeln!(
            out,
            "{:<width$}  {:>8.4}  {:>8.4}  {:>8.4}",
            "mean", self.iou, self.dice, self.mae
        )?;
        writeln!(
            out,
            "{:<width$}  {:>8.4}  {:>8.4}  {:>8.4}",
            "pooled", self.pooled_iou, self.pooled_dice, self.pooled_mae
        )
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}
