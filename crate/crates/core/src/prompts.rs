//! Box prompts derived from ground-truth masks.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::BinaryMask;

/// Inclusive pixel box; `x` is the column and `y` the row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

impl BoundingBox {
    pub fn new(x_min: usize, y_min: usize, x_max: usize, y_max: usize) -> Self {
        BoundingBox {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    /// Checks ordering and that the box fits a `height x width` patch.
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.x_min > self.x_max || self.y_min > self.y_max {
            return Err(Error::validation(format!("box {self:?} has inverted corners")));
        }
        if self.x_max >= width || self.y_max >= height {
            return Err(Error::validation(format!(
                "box {self:?} exceeds a {height}x{width} patch"
            )));
        }
        Ok(())
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.y_min..=self.y_max).contains(&row) && (self.x_min..=self.x_max).contains(&col)
    }

    pub fn width(&self) -> usize {
        self.x_max - self.x_min + 1
    }

    pub fn height(&self) -> usize {
        self.y_max - self.y_min + 1
    }

    /// Each side pushed outward by an independent uniform draw in
    /// `[0, jitter]`, then clamped to the patch.
    fn jittered(self, jitter: usize, height: usize, width: usize, rng: &mut impl Rng) -> Self {
        if jitter == 0 {
            return self;
        }
        let mut draw = || rng.random_range(0..=jitter);
        let (dx0, dy0, dx1, dy1) = (draw(), draw(), draw(), draw());
        BoundingBox {
            x_min: self.x_min.saturating_sub(dx0),
            y_min: self.y_min.saturating_sub(dy0),
            x_max: (self.x_max + dx1).min(width - 1),
            y_max: (self.y_max + dy1).min(height - 1),
        }
    }
}

/// How many prompts a training patch receives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    /// One box over the union of all foreground.
    #[default]
    UnionBox,
    /// One box per 8-connected foreground component.
    PerComponent,
}

fn tight_box(mask: &BinaryMask) -> Option<BoundingBox> {
    let (h, w) = mask.shape();
    let mut bb: Option<BoundingBox> = None;
    for r in 0..h {
        for c in 0..w {
            if mask.get(r, c) == 0 {
                continue;
            }
            bb = Some(match bb {
                None => BoundingBox::new(c, r, c, r),
                Some(b) => BoundingBox::new(b.x_min.min(c), b.y_min, b.x_max.max(c), r),
            });
        }
    }
    bb
}

/// Box around all foreground, optionally jittered outward.
pub fn bounding_box_from_mask(mask: &BinaryMask, jitter: usize, seed: u64) -> Result<BoundingBox> {
    let tight = tight_box(mask).ok_or(Error::EmptyMask)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(tight.jittered(jitter, mask.height(), mask.width(), &mut rng))
}

/// One box per 8-connected component, in row-major order of each
/// component's first pixel.
pub fn component_boxes(mask: &BinaryMask, jitter: usize, seed: u64) -> Result<Vec<BoundingBox>> {
    let (h, w) = mask.shape();
    let mut seen = vec![false; h * w];
    let mut boxes = Vec::new();
    let mut queue = VecDeque::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for start in 0..h * w {
        if seen[start] || mask.values()[start] == 0 {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut bb = BoundingBox::new(start % w, start / w, start % w, start / w);
        while let Some(idx) = queue.pop_front() {
            let (r, c) = (idx / w, idx % w);
            bb = BoundingBox::new(bb.x_min.min(c), bb.y_min.min(r), bb.x_max.max(c), bb.y_max.max(r));
            for dr in -1isize..=1 {
                for dc in -1isize..=1 {
                    let (nr, nc) = (r as isize + dr, c as isize + dc);
                    if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                        continue;
                    }
                    let n = nr as usize * w + nc as usize;
                    if !seen[n] && mask.values()[n] == 1 {
                        seen[n] = true;
                        queue.push_back(n);
                    }
                }
            }
        }
        boxes.push(bb.jittered(jitter, h, w, &mut rng));
    }
    if boxes.is_empty() {
        return Err(Error::EmptyMask);
    }
    Ok(boxes)
}

/// Whole-patch box used at inference when no mask exists.
pub fn full_patch_box(height: usize, width: usize) -> BoundingBox {
    assert!(height >= 1 && width >= 1, "patch must be at least 1x1");
    BoundingBox::new(0, 0, width - 1, height - 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::Grid;
    use proptest::prelude::*;

    fn mask_from(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> bool) -> BinaryMask {
        BinaryMask::new(Grid::from_fn(h, w, |r, c| u8::from(f(r, c)))).unwrap()
    }

    #[test]
    fn single_pixel_box() {
        let m = mask_from(16, 16, |r, c| r == 5 && c == 7);
        assert_eq!(bounding_box_from_mask(&m, 0, 0).unwrap(), BoundingBox::new(7, 5, 7, 5));
    }

    #[test]
    fn full_mask_box() {
        let m = mask_from(256, 256, |_, _| true);
        assert_eq!(
            bounding_box_from_mask(&m, 0, 0).unwrap(),
            BoundingBox::new(0, 0, 255, 255)
        );
    }

    #[test]
    fn empty_mask_errors() {
        assert!(matches!(
            bounding_box_from_mask(&BinaryMask::zeros(4, 4), 0, 0),
            Err(Error::EmptyMask)
        ));
        assert!(matches!(
            component_boxes(&BinaryMask::zeros(4, 4), 0, 0),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn full_patch_boxes() {
        assert_eq!(full_patch_box(256, 256), BoundingBox::new(0, 0, 255, 255));
        assert_eq!(full_patch_box(1, 1), BoundingBox::new(0, 0, 0, 0));
        assert_eq!(full_patch_box(64, 128), BoundingBox::new(0, 0, 127, 63));
    }

    #[test]
    fn random_blob_matches_coordinate_scan() {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = mask_from(64, 64, |_, _| rng.random::<f64>() < 0.02);
        let coords: Vec<(usize, usize)> = (0..64)
            .flat_map(|r| (0..64).map(move |c| (r, c)))
            .filter(|&(r, c)| m.get(r, c) == 1)
            .collect();
        let expected = BoundingBox::new(
            coords.iter().map(|p| p.1).min().unwrap(),
            coords.iter().map(|p| p.0).min().unwrap(),
            coords.iter().map(|p| p.1).max().unwrap(),
            coords.iter().map(|p| p.0).max().unwrap(),
        );
        assert_eq!(bounding_box_from_mask(&m, 0, 0).unwrap(), expected);
    }

    #[test]
    fn components_are_separated() {
        let m = mask_from(10, 10, |r, c| (r < 2 && c < 2) || (r >= 7 && (6..9).contains(&c)));
        let boxes = component_boxes(&m, 0, 0).unwrap();
        assert_eq!(boxes, vec![BoundingBox::new(0, 0, 1, 1), BoundingBox::new(6, 7, 8, 9)]);
    }

    #[test]
    fn diagonal_pixels_form_one_component() {
        let m = mask_from(3, 3, |r, c| r == c);
        assert_eq!(component_boxes(&m, 0, 0).unwrap().len(), 1);
    }

    proptest! {
        #[test]
        fn box_covers_foreground_and_stays_in_bounds(
            h in 1usize..40, w in 1usize..40, density in 0.01f64..0.5, seed: u64, jitter in 0usize..20
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut m = mask_from(h, w, |_, _| rng.random::<f64>() < density);
            if m.foreground_count() == 0 {
                m = mask_from(h, w, |r, c| r == h / 2 && c == w / 2);
            }
            let b = bounding_box_from_mask(&m, jitter, seed).unwrap();
            prop_assert!(b.validate(h, w).is_ok());
            for r in 0..h {
                for c in 0..w {
                    if m.get(r, c) == 1 {
                        prop_assert!(b.contains(r, c));
                    }
                }
            }
            if jitter == 0 {
                // shrinking any side drops a foreground pixel
                let on_row = |row: usize| (b.x_min..=b.x_max).any(|c| m.get(row, c) == 1);
                let on_col = |col: usize| (b.y_min..=b.y_max).any(|r| m.get(r, col) == 1);
                prop_assert!(on_row(b.y_min) && on_row(b.y_max));
                prop_assert!(on_col(b.x_min) && on_col(b.x_max));
            }
        }
    }
}
