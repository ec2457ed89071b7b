//! Image ingestion, IsoData thresholding, patch tiling and blended stitching.

mod io;
mod isodata;
mod tiling;

pub use io::{
    load_grayscale, load_mask, save_grayscale_png, save_mask_png, save_probability_png16, write_probability_csv,
};
pub use isodata::{binarize_intensity, isodata_threshold, isodata_threshold_global, IsodataMode};
pub use tiling::{
    extract_patches, pad_for_tiling, pad_to_multiple, reflect_index, stitch_grids, stitch_patches, BlendWindow,
    PadAmounts, PatchGrid,
};

use crate::error::{Error, Result};

/// Row-major 2-D array.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

impl<T: Copy> Grid<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if height * width != data.len() {
            return Err(Error::shape(format!(
                "{height}x{width} grid needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Grid { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Grid {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Grid { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> T {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: T) {
        self.data[row * self.width + col] = value;
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Grid<U> {
        Grid {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Copy of the `height x width` window anchored at `(row, col)`.
    pub fn window(&self, row: usize, col: usize, height: usize, width: usize) -> Grid<T> {
        assert!(
            row + height <= self.height && col + width <= self.width,
            "window out of bounds"
        );
        let mut data = Vec::with_capacity(height * width);
        for r in row..row + height {
            let start = r * self.width + col;
            data.extend_from_slice(&self.data[start..start + width]);
        }
        Grid { height, width, data }
    }
}

/// 8-bit single-channel intensity image.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayscaleImage(Grid<u8>);

impl GrayscaleImage {
    pub fn new(grid: Grid<u8>) -> Result<Self> {
        if grid.height == 0 || grid.width == 0 {
            return Err(Error::validation("image must be at least 1x1"));
        }
        Ok(GrayscaleImage(grid))
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        Self::new(Grid::new(height, width, data)?)
    }

    pub fn grid(&self) -> &Grid<u8> {
        &self.0
    }

    pub fn height(&self) -> usize {
        self.0.height
    }

    pub fn width(&self) -> usize {
        self.0.width
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.shape()
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.0.get(row, col)
    }

    pub fn pixels(&self) -> &[u8] {
        &self.0.data
    }

    /// Intensities scaled to `[0, 1]`.
    pub fn normalized(&self) -> Grid<f64> {
        normalize_patch(&self.0)
    }
}

/// Binary field with values exactly in `{0, 1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask(Grid<u8>);

impl BinaryMask {
    /// Validates that every value is 0 or 1.
    pub fn new(grid: Grid<u8>) -> Result<Self> {
        if grid.data.iter().any(|&v| v > 1) {
            return Err(Error::validation("binary mask values must be 0 or 1"));
        }
        Ok(BinaryMask(grid))
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        Self::new(Grid::new(height, width, data)?)
    }

    /// Any nonzero value becomes foreground.
    pub fn from_nonzero(grid: &Grid<u8>) -> Self {
        BinaryMask(normalize_mask(grid))
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        BinaryMask(Grid::filled(height, width, 0))
    }

    pub fn grid(&self) -> &Grid<u8> {
        &self.0
    }

    pub fn height(&self) -> usize {
        self.0.height
    }

    pub fn width(&self) -> usize {
        self.0.width
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.shape()
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.0.get(row, col)
    }

    pub fn values(&self) -> &[u8] {
        &self.0.data
    }

    pub fn foreground_count(&self) -> usize {
        self.0.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.foreground_count() as f64 / self.0.len() as f64
    }
}

/// Per-pixel foreground likelihood in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap(Grid<f64>);

impl ProbabilityMap {
    pub fn new(grid: Grid<f64>) -> Result<Self> {
        if let Some(v) = grid.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::validation(format!("probability {v} outside [0, 1]")));
        }
        Ok(ProbabilityMap(grid))
    }

    pub fn grid(&self) -> &Grid<f64> {
        &self.0
    }

    pub fn into_grid(self) -> Grid<f64> {
        self.0
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.shape()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.0.get(row, col)
    }

    pub fn values(&self) -> &[f64] {
        &self.0.data
    }
}

/// Scales 8-bit intensities into `[0, 1]` by dividing by 255.
pub fn normalize_patch(patch: &Grid<u8>) -> Grid<f64> {
    patch.map(|v| f64::from(v) / 255.0)
}

/// Maps any nonzero value to 1.
pub fn normalize_mask(mask: &Grid<u8>) -> Grid<u8> {
    mask.map(|v| u8::from(v > 0))
}

/// Keeps `(image, mask)` pairs whose mask foreground fraction lies in
/// `[min_fraction, 1 - min_fraction]`, preserving order.
pub fn select_training_patches<I: Clone>(
    image_patches: &[I],
    mask_patches: &[BinaryMask],
    min_foreground_fraction: f64,
) -> Result<Vec<(I, BinaryMask)>> {
    if image_patches.len() != mask_patches.len() {
        return Err(Error::validation(format!(
            "{} image patches but {} mask patches",
            image_patches.len(),
            mask_patches.len()
        )));
    }
    if !(0.0..=0.5).contains(&min_foreground_fraction) {
        return Err(Error::validation("min_foreground_fraction must lie in [0, 0.5]"));
    }
    Ok(image_patches
        .iter()
        .zip(mask_patches)
        .filter(|(_, m)| keeps_patch(m, min_foreground_fraction))
        .map(|(i, m)| (i.clone(), m.clone()))
        .collect())
}

pub(crate) fn keeps_patch(mask: &BinaryMask, min_foreground_fraction: f64) -> bool {
    let f = mask.foreground_fraction();
    f >= min_foreground_fraction && f <= 1.0 - min_foreground_fraction
}
