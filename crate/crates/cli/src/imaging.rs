//! Conversions between `[-1, 1]` tensors and 8-bit RGB rasters.

use std::path::Path;

use d3t_core::backbone::ImageBatch;
use d3t_core::tensor::Tensor;
use image::{imageops, RgbImage};

use crate::error::CliError;

pub fn to_unit(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

pub fn to_byte(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

/// Stack square RGB images of one size into a batch.
pub fn batch_from_images(images: &[RgbImage]) -> Result<ImageBatch, CliError> {
    let Some(first) = images.first() else {
        return Err(CliError::Dataset("no images".into()));
    };
    let r = first.width() as usize;
    let plane = r * r;
    let mut data = vec![0f32; images.len() * 3 * plane];
    for (n, img) in images.iter().enumerate() {
        if img.width() as usize != r || img.height() as usize != r {
            return Err(CliError::Dataset(format!(
                "image {n} is {}x{}, expected {r}x{r}",
                img.width(),
                img.height()
            )));
        }
        let base = n * 3 * plane;
        for (i, p) in img.pixels().enumerate() {
            for c in 0..3 {
                data[base + c * plane + i] = to_unit(p.0[c]);
            }
        }
    }
    Ok(ImageBatch::new(Tensor::new(vec![images.len(), 3, r, r], data)?)?)
}

pub fn image_of(batch: &ImageBatch, i: usize) -> RgbImage {
    let r = batch.resolution();
    let plane = r * r;
    let d = &batch.tensor().data()[i * 3 * plane..(i + 1) * 3 * plane];
    RgbImage::from_fn(r as u32, r as u32, |x, y| {
        let k = y as usize * r + x as usize;
        image::Rgb([to_byte(d[k]), to_byte(d[plane + k]), to_byte(d[2 * plane + k])])
    })
}

pub fn images_of(batches: &[ImageBatch]) -> Vec<RgbImage> {
    batches.iter().flat_map(|b| (0..b.len()).map(move |i| image_of(b, i))).collect()
}

/// Row-major tiling with `cols` columns; unused cells stay black.
pub fn tile(images: &[RgbImage], cols: usize) -> RgbImage {
    let r = images.first().map_or(0, |i| i.width());
    let cols = cols.max(1);
    let rows = images.len().div_ceil(cols);
    let mut out = RgbImage::new(r * cols as u32, r * rows as u32);
    for (k, img) in images.iter().enumerate() {
        let (x, y) = ((k % cols) as u32 * r, (k / cols) as u32 * r);
        imageops::replace(&mut out, img, x as i64, y as i64);
    }
    out
}

/// Columns of a near-square grid: `ceil(sqrt(n))`.
pub fn grid_cols(n: usize) -> usize {
    let mut c = (n as f64).sqrt() as usize;
    while c * c < n {
        c += 1;
    }
    c.max(1)
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    img.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}
