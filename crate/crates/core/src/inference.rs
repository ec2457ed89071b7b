//! Patch-wise prediction, thresholding and blended full-image assembly.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{
    extract_patches, normalize_patch, pad_for_tiling, stitch_patches, BinaryMask, BlendWindow, GrayscaleImage, Grid,
    ProbabilityMap,
};
use crate::model::SegModel;
use crate::prompts::{full_patch_box, BoundingBox};

/// Patches decoded per encoder call.
const PREDICT_CHUNK: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TilingConfig {
    pub patch_size: usize,
    pub stride: usize,
    pub window: BlendWindow,
    pub threshold: f64,
}

impl Default for TilingConfig {
    fn default() -> Self {
        TilingConfig {
            patch_size: 256,
            stride: 128,
            window: BlendWindow::HannSquared,
            threshold: 0.5,
        }
    }
}

impl TilingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.stride == 0 || self.stride > self.patch_size {
            return Err(Error::Config(format!(
                "need 0 < stride <= patch_size, got stride {} and patch_size {}",
                self.stride, self.patch_size
            )));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!("threshold {} outside (0, 1)", self.threshold)));
        }
        Ok(())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn probabilities(logits: &[f64], n: usize) -> Result<ProbabilityMap> {
    ProbabilityMap::new(Grid::new(n, n, logits.iter().map(|&v| sigmoid(v)).collect())?)
}

/// Foreground probability for one normalized patch under a box prompt.
pub fn predict_patch(model: &SegModel, patch: &Grid<f64>, bbox: &BoundingBox) -> Result<ProbabilityMap> {
    let n = model.config().patch_input_size;
    let emb = model.encode_image(patch)?;
    let prompt = model.encode_prompt(bbox)?;
    let logits = model.decode_mask(&emb, &prompt)?;
    probabilities(logits.data(), n)
}

/// Full-patch-box predictions for many patches, returned in input order.
pub fn predict_patches(model: &SegModel, patches: &[Grid<f64>]) -> Result<Vec<ProbabilityMap>> {
    let n = model.config().patch_input_size;
    let prompt = model.encode_prompt(&full_patch_box(n, n))?;
    let chunks: Vec<Result<Vec<ProbabilityMap>>> = patches
        .par_chunks(PREDICT_CHUNK)
        .map(|chunk| {
            let embs = model.encode_images(chunk)?;
            let prompts = vec![&prompt; chunk.len()];
            let logits = model.decode_batch(&embs.iter().collect::<Vec<_>>(), &prompts)?;
            logits.data().chunks(n * n).map(|l| probabilities(l, n)).collect()
        })
        .collect();
    let mut out = Vec::with_capacity(patches.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

/// Pixel is foreground iff its probability is strictly above `threshold`.
pub fn binarize(prob: &ProbabilityMap, threshold: f64) -> BinaryMask {
    let g = prob.grid();
    BinaryMask::new(g.map(|v| u8::from(v > threshold))).expect("0/1 values")
}

/// Pads, tiles, predicts each patch with a full-patch box, blends, crops
/// back and thresholds. Returns the mask, the probability map and the
/// number of patches predicted.
pub fn segment_image(
    model: &SegModel,
    image: &GrayscaleImage,
    tiling: &TilingConfig,
) -> Result<(BinaryMask, ProbabilityMap, usize)> {
    tiling.validate()?;
    let n = model.config().patch_input_size;
    if n != tiling.patch_size {
        return Err(Error::Config(format!(
            "model expects {n}px patches but tiling uses {}",
            tiling.patch_size
        )));
    }
    let (padded, pad) = pad_for_tiling(image.grid(), tiling.patch_size, tiling.stride)?;
    let (patches, grid) = extract_patches(&padded, tiling.patch_size, tiling.stride)?;
    let grid = grid.with_padding(pad);
    let normalized: Vec<Grid<f64>> = patches.iter().map(normalize_patch).collect();
    let maps = predict_patches(model, &normalized)?;
    let prob = stitch_patches(&maps, &grid, tiling.window)?;
    Ok((binarize(&prob, tiling.threshold), prob, grid.len()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ModelConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn binarize_is_strict() {
        let p = |v| ProbabilityMap::new(Grid::filled(3, 4, v)).unwrap();
        assert_eq!(binarize(&p(0.7), 0.5).foreground_count(), 12);
        assert_eq!(binarize(&p(0.5), 0.5).foreground_count(), 0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = Grid::from_fn(20, 30, |_, _| rng.random::<f64>());
        let m = binarize(&ProbabilityMap::new(g.clone()).unwrap(), 0.3);
        for (v, b) in g.data().iter().zip(m.values()) {
            assert_eq!(*b, u8::from(*v > 0.3));
        }
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
        for x in [-3.0, -0.1, 2.5] {
            assert!((sigmoid(x) - 1.0 / (1.0 + f64::exp(-x))).abs() < 1e-15);
        }
    }

    #[test]
    fn config_validation() {
        assert!(TilingConfig::default().validate().is_ok());
        let bad = TilingConfig {
            stride: 300,
            ..TilingConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = TilingConfig {
            threshold: 1.0,
            ..TilingConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn predict_patch_is_sigmoid_of_logits() {
        let model = build_model(&ModelConfig::toy()).unwrap();
        let patch = Grid::from_fn(256, 256, |r, c| ((r * 7 + c * 3) % 255) as f64 / 255.0);
        let bbox = BoundingBox::new(10, 20, 200, 220);
        let prob = predict_patch(&model, &patch, &bbox).unwrap();
        let logits = model
            .decode_mask(
                &model.encode_image(&patch).unwrap(),
                &model.encode_prompt(&bbox).unwrap(),
            )
            .unwrap();
        for (p, l) in prob.values().iter().zip(logits.data()) {
            assert!((p - 1.0 / (1.0 + (-l).exp())).abs() < 1e-12);
        }
    }

    #[test]
    fn partition_case_equals_independent_patches() {
        let model = build_model(&ModelConfig::toy()).unwrap();
        let img = GrayscaleImage::new(Grid::from_fn(300, 270, |r, c| ((r * 13 + c * 5) % 256) as u8)).unwrap();
        let tiling = TilingConfig {
            stride: 256,
            window: BlendWindow::Unit,
            ..TilingConfig::default()
        };
        let (mask, prob, count) = segment_image(&model, &img, &tiling).unwrap();
        assert_eq!(count, 4);
        assert_eq!(mask.shape(), (300, 270));
        let (padded, _) = pad_for_tiling(img.grid(), 256, 256).unwrap();
        let patch = normalize_patch(&padded.window(256, 0, 256, 256));
        let single = predict_patch(&model, &patch, &full_patch_box(256, 256)).unwrap();
        for r in 256..300 {
            for c in 0..256 {
                let v = single.get(r - 256, c);
                assert_eq!(prob.get(r, c), v);
                assert_eq!(mask.get(r, c), u8::from(v > 0.5));
            }
        }
    }
}
