//! Seeded synthetic data: bright disks on a darker noisy background, with
//! exact ground-truth masks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::imaging::{normalize_patch, BinaryMask, GrayscaleImage, Grid};
use crate::prompts::bounding_box_from_mask;
use crate::training::{SampleRecord, SourceTag};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Disk {
    pub cy: f64,
    pub cx: f64,
    pub radius: f64,
}

impl Disk {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        let (dy, dx) = (row as f64 - self.cy, col as f64 - self.cx);
        dy * dy + dx * dx <= self.radius * self.radius
    }
}

const BACKGROUND: f64 = 70.0;
const FOREGROUND: f64 = 180.0;
const NOISE_STD: f64 = 12.0;

/// Renders `disks` into an `h x w` image with Gaussian noise.
pub fn render_disks(h: usize, w: usize, disks: &[Disk], seed: u64) -> (GrayscaleImage, BinaryMask) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, NOISE_STD).expect("valid std");
    let mask = Grid::from_fn(h, w, |r, c| u8::from(disks.iter().any(|d| d.contains(r, c))));
    let image = Grid::from_fn(h, w, |r, c| {
        let base = if mask.get(r, c) == 1 { FOREGROUND } else { BACKGROUND };
        (base + noise.sample(&mut rng)).round().clamp(0.0, 255.0) as u8
    });
    (
        GrayscaleImage::new(image).expect("non-empty"),
        BinaryMask::new(mask).expect("binary"),
    )
}

/// A single disk fully inside a `size x size` frame, radius in
/// `[size/8, size/4]`.
pub fn random_disk(size: usize, rng: &mut impl Rng) -> Disk {
    let s = size as f64;
    let radius = rng.random_range(s / 8.0..=s / 4.0);
    let margin = radius + 2.0;
    Disk {
        cy: rng.random_range(margin..=s - 1.0 - margin),
        cx: rng.random_range(margin..=s - 1.0 - margin),
        radius,
    }
}

/// `n` single-disk samples of `size x size`, boxed tightly and alternating
/// CT/SEM tags so stratified splits see both.
pub fn disk_dataset(n: usize, size: usize, seed: u64) -> Result<Vec<SampleRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let disk = random_disk(size, &mut rng);
            let (image, mask) = render_disks(size, size, &[disk], rng.random());
            let bbox = bounding_box_from_mask(&mask, 0, 0)?;
            let tag = if i % 2 == 0 { SourceTag::Ct } else { SourceTag::Sem };
            SampleRecord::new(format!("disk{i:03}"), normalize_patch(image.grid()), mask, bbox, tag)
        })
        .collect()
}

/// A large image scattered with non-overlapping disks of radius
/// `[min_r, max_r]`.
pub fn disk_field(h: usize, w: usize, count: usize, min_r: f64, max_r: f64, seed: u64) -> (GrayscaleImage, BinaryMask) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut disks: Vec<Disk> = Vec::with_capacity(count);
    let mut attempts = 0;
    while disks.len() < count && attempts < count * 200 {
        attempts += 1;
        let radius = rng.random_range(min_r..=max_r);
        let m = radius + 2.0;
        if 2.0 * m >= h.min(w) as f64 {
            break;
        }
        let d = Disk {
            cy: rng.random_range(m..=h as f64 - 1.0 - m),
            cx: rng.random_range(m..=w as f64 - 1.0 - m),
            radius,
        };
        let clear = disks
            .iter()
            .all(|o| (o.cy - d.cy).hypot(o.cx - d.cx) > o.radius + d.radius + 4.0);
        if clear {
            disks.push(d);
        }
    }
    render_disks(h, w, &disks, rng.random())
}
