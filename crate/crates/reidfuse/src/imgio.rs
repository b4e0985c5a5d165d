//! Small file/image helpers shared across the toolkit: atomic writes,
//! deterministic PNG encoding, and image <-> tensor conversion.

use std::path::Path;

use image::codecs::png::PngEncoder;
use image::{ExtendedColorType, ImageEncoder, ImageReader, RgbImage};
use ndarray::{Array3, Array4};

use crate::error::{Error, Result};

/// Writes `bytes` to `path` atomically: write to `<path>.tmp`, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() && !parent.exists() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let tmp = path.with_extension(match path.extension() {
        Some(ext) => format!("{}.tmp", ext.to_string_lossy()),
        None => "tmp".to_string(),
    });
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Encodes an RGB image as PNG bytes. Encoding settings are fixed so the same
/// pixels always produce the same bytes.
pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    PngEncoder::new(&mut buf)
        .write_image(
            img.as_raw(),
            img.width(),
            img.height(),
            ExtendedColorType::Rgb8,
        )
        .map_err(|e| Error::Numerical(format!("png encode failed: {e}")))?;
    Ok(buf)
}

/// Writes an RGB image as a PNG file via [`write_atomic`].
pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    write_atomic(path, &encode_png(img)?)
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::Image {
            path: path.into(),
            source: e,
        })?;
    Ok(img.to_rgb8())
}

/// Converts an RGB image to a CHW float tensor with values in [-1, 1].
pub fn image_to_tensor(img: &RgbImage) -> Array3<f32> {
    let (w, h) = img.dimensions();
    let mut out = Array3::zeros((3, h as usize, w as usize));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = px[c] as f32 / 127.5 - 1.0;
        }
    }
    out
}

/// Loads a batch of same-size images into a (N, 3, H, W) tensor, checking each
/// image against the expected size.
pub fn load_batch(paths: &[&Path], expect_hw: (usize, usize)) -> Result<Array4<f32>> {
    let (eh, ew) = expect_hw;
    let mut out = Array4::zeros((paths.len(), 3, eh, ew));
    for (i, path) in paths.iter().enumerate() {
        let img = load_rgb(path)?;
        let (w, h) = img.dimensions();
        if (h as usize, w as usize) != expect_hw {
            return Err(Error::Shape(format!(
                "image {} is {}x{}, expected {}x{}",
                path.display(),
                w,
                h,
                ew,
                eh
            )));
        }
        out.index_axis_mut(ndarray::Axis(0), i)
            .assign(&image_to_tensor(&img));
    }
    Ok(out)
}
