//! 8-bit PNG in and out of `[0, 1]` float tensors.

use std::path::Path;

use image::{ImageBuffer, Luma, Rgb};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum ImageIoError {
    #[error("cannot read image {path}: {source}")]
    Read {
        path: String,
        source: image::ImageError,
    },
    #[error("cannot write image {path}: {source}")]
    Write {
        path: String,
        source: image::ImageError,
    },
    #[error("{0}")]
    BadShape(String),
}

/// Load a PNG as `(1, H, W, 3)` with values `v / 255`.
pub fn load_png(path: &Path) -> Result<Tensor<f32>, ImageIoError> {
    let img = image::open(path)
        .map_err(|source| ImageIoError::Read {
            path: path.display().to_string(),
            source,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let mut data = Vec::with_capacity((w * h * 3) as usize);
    for px in img.pixels() {
        for ch in 0..3 {
            data.push(px.0[ch] as f32 / 255.0);
        }
    }
    Tensor::from_vec(&[1, h as usize, w as usize, 3], data)
        .map_err(|e| ImageIoError::BadShape(e.to_string()))
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round_ties_even() as u8
}

/// Write a `(1, H, W, 3)` or `(H, W, 3)` tensor as 8-bit PNG: clamp,
/// scale by 255, round half to even.
pub fn save_png(path: &Path, img: &Tensor<f32>) -> Result<(), ImageIoError> {
    let shape = img.shape().to_vec();
    let (h, w) = match shape.as_slice() {
        [1, h, w, 3] => (*h, *w),
        [h, w, 3] => (*h, *w),
        other => {
            return Err(ImageIoError::BadShape(format!(
                "expected (1, H, W, 3) or (H, W, 3), got {other:?}"
            )))
        }
    };
    let data = img.data();
    let buf = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let base = (y as usize * w + x as usize) * 3;
        Rgb([
            quantize(data[base]),
            quantize(data[base + 1]),
            quantize(data[base + 2]),
        ])
    });
    buf.save(path).map_err(|source| ImageIoError::Write {
        path: path.display().to_string(),
        source,
    })
}

/// Write a single-channel map as grayscale PNG, min-max normalized.
/// Used for the per-stage feature dumps.
pub fn save_gray_png(path: &Path, h: usize, w: usize, values: &[f32]) -> Result<(), ImageIoError> {
    if values.len() != h * w {
        return Err(ImageIoError::BadShape(format!(
            "{} values for a {h}x{w} map",
            values.len()
        )));
    }
    let lo = values.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let buf = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let v = (values[y as usize * w + x as usize] - lo) / span;
        Luma([quantize(v)])
    });
    buf.save(path).map_err(|source| ImageIoError::Write {
        path: path.display().to_string(),
        source,
    })
}
