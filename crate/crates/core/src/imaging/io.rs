use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use image::{ImageBuffer, ImageError, ImageReader, Luma};

use super::{BinaryMask, GrayscaleImage, Grid, ProbabilityMap};
use crate::error::{Error, Result};

fn decode(path: &Path) -> Result<image::DynamicImage> {
    let reader = ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let reader = reader.with_guessed_format().map_err(|e| Error::io(path, e))?;
    reader.decode().map_err(|e| match e {
        ImageError::IoError(source) if source.kind() != std::io::ErrorKind::UnexpectedEof => Error::io(path, source),
        other => Error::Format {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    })
}

/// Reads a PNG or TIFF as 8-bit grayscale. Colour images are reduced to luma.
pub fn load_grayscale(path: impl AsRef<Path>) -> Result<GrayscaleImage> {
    let path = path.as_ref();
    let luma = decode(path)?.into_luma8();
    let (w, h) = luma.dimensions();
    if w == 0 || h == 0 {
        return Err(Error::validation(format!("{} has zero size", path.display())));
    }
    GrayscaleImage::from_vec(h as usize, w as usize, luma.into_raw())
}

/// Reads a mask image; any nonzero pixel is foreground.
pub fn load_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    let img = load_grayscale(path)?;
    Ok(BinaryMask::from_nonzero(img.grid()))
}

fn save_luma8(path: &Path, grid: &Grid<u8>) -> Result<()> {
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(grid.width() as u32, grid.height() as u32, grid.data().to_vec())
            .expect("grid length matches its shape");
    buf.save(path).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn save_grayscale_png(path: impl AsRef<Path>, image: &GrayscaleImage) -> Result<()> {
    save_luma8(path.as_ref(), image.grid())
}

/// Writes a mask as 0/255 PNG.
pub fn save_mask_png(path: impl AsRef<Path>, mask: &BinaryMask) -> Result<()> {
    save_luma8(path.as_ref(), &mask.grid().map(|v| v * 255))
}

/// Writes a probability map as a 16-bit PNG (`round(p * 65535)`).
pub fn save_probability_png16(path: impl AsRef<Path>, prob: &ProbabilityMap) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = prob.shape();
    let raw: Vec<u16> = prob.values().iter().map(|&p| (p * 65535.0).round() as u16).collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(w as u32, h as u32, raw).expect("length matches shape");
    buf.save(path).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// One CSV row per image row, six decimals per value.
pub fn write_probability_csv(path: impl AsRef<Path>, prob: &ProbabilityMap) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let (h, w) = prob.shape();
    let mut line = String::with_capacity(w * 9);
    for r in 0..h {
        line.clear();
        for c in 0..w {
            if c > 0 {
                line.push(',');
            }
            line.push_str(&format!("{:.6}", prob.get(r, c)));
        }
        line.push('\n');
        out.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}
