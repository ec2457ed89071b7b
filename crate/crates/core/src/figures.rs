//! Static raster figures: prediction panels and loss curves.

use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::imaging::{BinaryMask, GrayscaleImage, ProbabilityMap};
use crate::training::EpochRecord;

const GAP: u32 = 8;

fn save_err(path: &Path, e: image::ImageError) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// Original | probability map | binary prediction, separated by white bars.
pub fn prediction_panel(original: &GrayscaleImage, prob: &ProbabilityMap, mask: &BinaryMask) -> Result<GrayImage> {
    let (h, w) = original.shape();
    if prob.shape() != (h, w) || mask.shape() != (h, w) {
        return Err(Error::shape(format!(
            "panel parts differ: {:?}, {:?}, {:?}",
            (h, w),
            prob.shape(),
            mask.shape()
        )));
    }
    let (h32, w32) = (h as u32, w as u32);
    let mut img = GrayImage::from_pixel(3 * w32 + 2 * GAP, h32, Luma([255]));
    for r in 0..h {
        for c in 0..w {
            let (y, x) = (r as u32, c as u32);
            img.put_pixel(x, y, Luma([original.get(r, c)]));
            img.put_pixel(w32 + GAP + x, y, Luma([(prob.get(r, c) * 255.0).round() as u8]));
            img.put_pixel(2 * (w32 + GAP) + x, y, Luma([mask.get(r, c) * 255]));
        }
    }
    Ok(img)
}

pub fn save_prediction_panel(
    path: &Path,
    original: &GrayscaleImage,
    prob: &ProbabilityMap,
    mask: &BinaryMask,
) -> Result<()> {
    prediction_panel(original, prob, mask)?
        .save(path)
        .map_err(|e| save_err(path, e))
}

// 3x5 glyphs, one row per byte, high bit on the left.
fn glyph(ch: char) -> Option<[u8; 5]> {
    Some(match ch {
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b111, 0b001, 0b111, 0b100, 0b111],
        '3' => [0b111, 0b001, 0b111, 0b001, 0b111],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b111, 0b001, 0b111],
        '6' => [0b111, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b010, 0b010, 0b010],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b111],
        '.' => [0b000, 0b000, 0b000, 0b000, 0b010],
        '-' => [0b000, 0b000, 0b111, 0b000, 0b000],
        'e' => [0b000, 0b111, 0b111, 0b100, 0b111],
        _ => return None,
    })
}

fn draw_text(img: &mut RgbImage, x0: i64, y0: i64, text: &str, scale: i64, color: Rgb<u8>) {
    for (k, ch) in text.chars().enumerate() {
        let Some(rows) = glyph(ch) else { continue };
        let gx = x0 + k as i64 * 4 * scale;
        for (r, bits) in rows.iter().enumerate() {
            for c in 0..3 {
                if bits >> (2 - c) & 1 == 1 {
                    for dy in 0..scale {
                        for dx in 0..scale {
                            put(img, gx + c * scale + dx, y0 + r as i64 * scale + dy, color);
                        }
                    }
                }
            }
        }
    }
}

fn put(img: &mut RgbImage, x: i64, y: i64, color: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, color);
    }
}

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        for o in -1..=1 {
            put(img, x, y + o, color);
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

pub const TRAIN_COLOR: Rgb<u8> = Rgb([31, 119, 180]);
pub const VAL_COLOR: Rgb<u8> = Rgb([255, 127, 14]);

/// Train (blue) and validation (orange) loss against epoch. The y axis runs
/// from zero to the largest loss with five labelled gridlines.
pub fn loss_curve(history: &[EpochRecord]) -> Result<RgbImage> {
    if history.is_empty() {
        return Err(Error::validation("no epochs to plot"));
    }
    let (w, h) = (800i64, 500i64);
    let (left, right, top, bottom) = (70i64, 20i64, 30i64, 50i64);
    let mut img = RgbImage::from_pixel(w as u32, h as u32, Rgb([255, 255, 255]));
    let black = Rgb([0, 0, 0]);
    let grid = Rgb([225, 225, 225]);
    let ymax = history
        .iter()
        .flat_map(|r| [r.train_loss, r.val_loss])
        .filter(|v| v.is_finite())
        .fold(0.0f64, f64::max)
        .max(f64::MIN_POSITIVE);
    let n = history.len();
    let px = |epoch: usize| {
        let span = (n.max(2) - 1) as f64;
        left + ((epoch - 1) as f64 / span * (w - left - right) as f64).round() as i64
    };
    let py = |v: f64| (h - bottom) - (v / ymax * (h - top - bottom) as f64).round() as i64;
    for k in 0..=4 {
        let y = py(ymax * k as f64 / 4.0);
        line(&mut img, (left, y), (w - right, y), grid);
        draw_text(&mut img, 4, y - 5, &format!("{:.3}", ymax * k as f64 / 4.0), 2, black);
    }
    line(&mut img, (left, top), (left, h - bottom), black);
    line(&mut img, (left, h - bottom), (w - right, h - bottom), black);
    for r in history {
        let x = px(r.epoch.clamp(1, n));
        line(&mut img, (x, h - bottom), (x, h - bottom + 6), black);
    }
    draw_text(&mut img, left - 4, h - bottom + 12, "1", 2, black);
    let last = n.to_string();
    draw_text(
        &mut img,
        px(n) - 8 * last.len() as i64 + 4,
        h - bottom + 12,
        &last,
        2,
        black,
    );
    for (color, pick) in [
        (TRAIN_COLOR, (|r: &EpochRecord| r.train_loss) as fn(&EpochRecord) -> f64),
        (VAL_COLOR, |r: &EpochRecord| r.val_loss),
    ] {
        let pts: Vec<(i64, i64)> = history
            .iter()
            .filter(|r| pick(r).is_finite())
            .map(|r| (px(r.epoch.clamp(1, n)), py(pick(r))))
            .collect();
        for seg in pts.windows(2) {
            line(&mut img, seg[0], seg[1], color);
        }
        if let [only] = pts.as_slice() {
            line(&mut img, *only, *only, color);
        }
    }
    for (i, color) in [TRAIN_COLOR, VAL_COLOR].into_iter().enumerate() {
        let x = w - right - 120 + 60 * i as i64;
        for dy in 0..10 {
            line(&mut img, (x, 10 + dy), (x + 40, 10 + dy), color);
        }
    }
    Ok(img)
}

pub fn save_loss_curve(path: &Path, history: &[EpochRecord]) -> Result<()> {
    loss_curve(history)?.save(path).map_err(|e| save_err(path, e))
}
