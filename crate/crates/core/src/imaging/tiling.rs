use serde::{Deserialize, Serialize};

use super::{GrayscaleImage, Grid, ProbabilityMap};
use crate::error::{Error, Result};

/// Rows added at the bottom and columns added at the right.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PadAmounts {
    pub bottom: usize,
    pub right: usize,
}

/// Tiling geometry over a padded image.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid {
    patch_size: usize,
    stride: usize,
    origins: Vec<(usize, usize)>,
    padded_shape: (usize, usize),
    pad_amounts: PadAmounts,
}

fn check_patch_stride(patch_size: usize, stride: usize) -> Result<()> {
    if patch_size == 0 {
        return Err(Error::validation("patch size must be at least 1"));
    }
    if stride == 0 || stride > patch_size {
        return Err(Error::validation(format!(
            "stride {stride} must lie in 1..={patch_size} (larger strides leave gaps)"
        )));
    }
    Ok(())
}

impl PatchGrid {
    /// Row-major anchors over a `height x width` image that is already padded.
    pub fn new(height: usize, width: usize, patch_size: usize, stride: usize) -> Result<Self> {
        check_patch_stride(patch_size, stride)?;
        for (name, dim) in [("height", height), ("width", width)] {
            if dim < patch_size || !(dim - patch_size).is_multiple_of(stride) {
                return Err(Error::validation(format!(
                    "{name} {dim} does not tile with patch {patch_size} and stride {stride}"
                )));
            }
        }
        let rows = (height - patch_size) / stride + 1;
        let cols = (width - patch_size) / stride + 1;
        let origins = (0..rows)
            .flat_map(|r| (0..cols).map(move |c| (r * stride, c * stride)))
            .collect();
        Ok(PatchGrid {
            patch_size,
            stride,
            origins,
            padded_shape: (height, width),
            pad_amounts: PadAmounts::default(),
        })
    }

    /// Records how much of the padded extent is padding, for cropping on stitch.
    pub fn with_padding(mut self, pad: PadAmounts) -> Self {
        assert!(pad.bottom < self.padded_shape.0 && pad.right < self.padded_shape.1);
        self.pad_amounts = pad;
        self
    }

    /// Smallest extent `>= max(dim, patch)` that the grid tiles exactly.
    pub fn padded_extent(dim: usize, patch_size: usize, stride: usize) -> usize {
        if dim <= patch_size {
            return patch_size;
        }
        patch_size + (dim - patch_size).div_ceil(stride) * stride
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn origins(&self) -> &[(usize, usize)] {
        &self.origins
    }

    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn padded_shape(&self) -> (usize, usize) {
        self.padded_shape
    }

    pub fn pad_amounts(&self) -> PadAmounts {
        self.pad_amounts
    }

    /// Shape after cropping the padding.
    pub fn original_shape(&self) -> (usize, usize) {
        (
            self.padded_shape.0 - self.pad_amounts.bottom,
            self.padded_shape.1 - self.pad_amounts.right,
        )
    }
}

/// Mirror index without edge repetition (`dcba|abcd|cba`), for any `i`.
pub fn reflect_index(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

fn reflect_pad<T: Copy>(grid: &Grid<T>, pad: PadAmounts) -> Grid<T> {
    let (h, w) = grid.shape();
    Grid::from_fn(h + pad.bottom, w + pad.right, |r, c| {
        grid.get(reflect_index(r, h), reflect_index(c, w))
    })
}

/// Reflect-pads bottom and right so the patch grid with `stride` covers the
/// image exactly.
pub fn pad_for_tiling<T: Copy>(grid: &Grid<T>, patch_size: usize, stride: usize) -> Result<(Grid<T>, PadAmounts)> {
    check_patch_stride(patch_size, stride)?;
    let (h, w) = grid.shape();
    let pad = PadAmounts {
        bottom: PatchGrid::padded_extent(h, patch_size, stride) - h,
        right: PatchGrid::padded_extent(w, patch_size, stride) - w,
    };
    Ok((reflect_pad(grid, pad), pad))
}

/// Reflect-pads so both dimensions become multiples of `patch_size`.
pub fn pad_to_multiple(image: &GrayscaleImage, patch_size: usize) -> Result<(GrayscaleImage, PadAmounts)> {
    let (padded, pad) = pad_for_tiling(image.grid(), patch_size, patch_size)?;
    Ok((GrayscaleImage::new(padded)?, pad))
}

/// Cuts row-major patches. The grid's pad amounts are zero; attach them with
/// [`PatchGrid::with_padding`] when the input was padded.
pub fn extract_patches<T: Copy>(grid: &Grid<T>, patch_size: usize, stride: usize) -> Result<(Vec<Grid<T>>, PatchGrid)> {
    let (h, w) = grid.shape();
    let layout = PatchGrid::new(h, w, patch_size, stride)?;
    let patches = layout
        .origins()
        .iter()
        .map(|&(r, c)| grid.window(r, c, patch_size, patch_size))
        .collect();
    Ok((patches, layout))
}

/// Per-pixel weighting applied when overlapping patch outputs are averaged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlendWindow {
    Unit,
    /// Outer product of two periodic Hann windows, `sin^2(pi (i + 1/2) / n)`,
    /// which never reaches zero so edge pixels keep positive weight.
    #[default]
    HannSquared,
}

impl BlendWindow {
    pub fn weights(&self, patch_size: usize) -> Vec<f64> {
        match self {
            BlendWindow::Unit => vec![1.0; patch_size * patch_size],
            BlendWindow::HannSquared => {
                let n = patch_size as f64;
                let hann: Vec<f64> = (0..patch_size)
                    .map(|i| (std::f64::consts::PI * (i as f64 + 0.5) / n).sin().powi(2))
                    .collect();
                hann.iter().flat_map(|&a| hann.iter().map(move |&b| a * b)).collect()
            }
        }
    }
}

impl std::str::FromStr for BlendWindow {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unit" => Ok(BlendWindow::Unit),
            "hann_squared" | "hann2" => Ok(BlendWindow::HannSquared),
            other => Err(Error::validation(format!("unknown blend window '{other}'"))),
        }
    }
}

/// Weighted average of overlapping patch values, cropped to the original shape.
///
/// Patches are accumulated in grid order, so the result does not depend on
/// the order in which they were produced.
pub fn stitch_grids(patches: &[Grid<f64>], grid: &PatchGrid, window: BlendWindow) -> Result<Grid<f64>> {
    if patches.len() != grid.len() {
        return Err(Error::validation(format!(
            "{} patch maps for a grid of {} origins",
            patches.len(),
            grid.len()
        )));
    }
    let p = grid.patch_size();
    if let Some(bad) = patches.iter().find(|m| m.shape() != (p, p)) {
        return Err(Error::shape(format!(
            "patch map is {:?}, expected {p}x{p}",
            bad.shape()
        )));
    }
    let weights = window.weights(p);
    let (ph, pw) = grid.padded_shape();
    let mut num = vec![0.0; ph * pw];
    let mut den = vec![0.0; ph * pw];
    for (patch, &(r0, c0)) in patches.iter().zip(grid.origins()) {
        for r in 0..p {
            let row = (r0 + r) * pw + c0;
            let wrow = &weights[r * p..(r + 1) * p];
            let vrow = &patch.data()[r * p..(r + 1) * p];
            for c in 0..p {
                num[row + c] += wrow[c] * vrow[c];
                den[row + c] += wrow[c];
            }
        }
    }
    let (oh, ow) = grid.original_shape();
    let mut out = Vec::with_capacity(oh * ow);
    for r in 0..oh {
        for c in 0..ow {
            let d = den[r * pw + c];
            if d <= 0.0 {
                return Err(Error::Coverage { row: r, col: c });
            }
            out.push(num[r * pw + c] / d);
        }
    }
    Grid::new(oh, ow, out)
}

/// [`stitch_grids`] over probability maps.
pub fn stitch_patches(patch_maps: &[ProbabilityMap], grid: &PatchGrid, window: BlendWindow) -> Result<ProbabilityMap> {
    let grids: Vec<Grid<f64>> = patch_maps.iter().map(|m| m.grid().clone()).collect();
    let stitched = stitch_grids(&grids, grid, window)?;
    ProbabilityMap::new(stitched.map(|v| v.clamp(0.0, 1.0)))
}
