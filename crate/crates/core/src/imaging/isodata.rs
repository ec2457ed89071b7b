use serde::{Deserialize, Serialize};

use super::{BinaryMask, GrayscaleImage};
use crate::error::{Error, Result};

const MAX_ITERATIONS: usize = 100;

/// Whether a threshold is computed per image or over the pooled histogram of
/// a whole stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IsodataMode {
    #[default]
    PerImage,
    Global,
}

fn histogram<'a>(images: impl IntoIterator<Item = &'a GrayscaleImage>) -> [u64; 256] {
    let mut hist = [0u64; 256];
    for img in images {
        for &p in img.pixels() {
            hist[p as usize] += 1;
        }
    }
    hist
}

struct Cumulative {
    count: [u64; 256],
    sum: [f64; 256],
}

impl Cumulative {
    fn new(hist: &[u64; 256]) -> Self {
        let mut count = [0u64; 256];
        let mut sum = [0f64; 256];
        let (mut c, mut s) = (0u64, 0f64);
        for (level, &h) in hist.iter().enumerate() {
            c += h;
            s += h as f64 * level as f64;
            count[level] = c;
            sum[level] = s;
        }
        Cumulative { count, sum }
    }

    /// Midpoint of the class means below-or-equal and above `t`.
    fn midpoint(&self, t: usize) -> f64 {
        let (n_lo, s_lo) = (self.count[t], self.sum[t]);
        let n_hi = self.count[255] - n_lo;
        let s_hi = self.sum[255] - s_lo;
        (s_lo / n_lo as f64 + s_hi / n_hi as f64) / 2.0
    }
}

fn threshold_from_histogram(hist: &[u64; 256]) -> Result<u8> {
    let lo = hist
        .iter()
        .position(|&h| h > 0)
        .ok_or_else(|| Error::validation("empty image"))?;
    let hi = hist.iter().rposition(|&h| h > 0).expect("nonempty histogram");
    if lo == hi {
        return Err(Error::DegenerateHistogram(lo as u8));
    }
    let cum = Cumulative::new(hist);
    // Both classes stay nonempty for t in [lo, hi - 1].
    let clamp = |v: f64| (v.round() as usize).clamp(lo, hi - 1);
    let mean = cum.sum[255] / cum.count[255] as f64;
    let mut t = clamp(mean);
    for _ in 0..MAX_ITERATIONS {
        let next = clamp(cum.midpoint(t));
        if next == t {
            break;
        }
        t = next;
    }
    Ok(t as u8)
}

/// IsoData (iterative intermeans) threshold of one image.
///
/// Starting from the global mean, the level is repeatedly replaced by the
/// rounded midpoint of the two class means until it stops moving. Pixels
/// `<= t` are background and `> t` foreground.
pub fn isodata_threshold(image: &GrayscaleImage) -> Result<u8> {
    threshold_from_histogram(&histogram([image]))
}

/// IsoData threshold over the pooled histogram of several images.
pub fn isodata_threshold_global(images: &[GrayscaleImage]) -> Result<u8> {
    if images.is_empty() {
        return Err(Error::validation("no images to threshold"));
    }
    threshold_from_histogram(&histogram(images))
}

/// `1` where intensity `> threshold`.
pub fn binarize_intensity(image: &GrayscaleImage, threshold: u8) -> BinaryMask {
    BinaryMask::new(image.grid().map(|v| u8::from(v > threshold))).expect("values are 0/1")
}
