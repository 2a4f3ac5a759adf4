//! Directory ingestion: decode, center-crop, resize, map to `[-1, 1]`.

use std::path::{Path, PathBuf};

use d3t_core::backbone::ImageBatch;
use d3t_core::inversion::item_hash;
use image::imageops::{self, FilterType};
use image::RgbImage;

use crate::error::CliError;
use crate::imaging::batch_from_images;

const EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "bmp"];

#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: ImageBatch,
    /// File names, sorted.
    pub names: Vec<String>,
    pub item_hashes: Vec<String>,
}

impl Dataset {
    pub fn from_images(images: &[RgbImage], names: Vec<String>) -> Result<Self, CliError> {
        let batch = batch_from_images(images)?;
        let item_hashes = (0..batch.len()).map(|i| item_hash(&batch.item(i))).collect();
        Ok(Self {
            images: batch,
            names,
            item_hashes,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn resolution(&self) -> usize {
        self.images.resolution()
    }

    /// One single-image batch per item.
    pub fn items(&self) -> Vec<ImageBatch> {
        (0..self.len()).map(|i| self.images.item(i)).collect()
    }
}

pub fn square(img: RgbImage, resolution: u32) -> RgbImage {
    let (w, h) = img.dimensions();
    let s = w.min(h);
    let cropped = if w == h {
        img
    } else {
        imageops::crop_imm(&img, (w - s) / 2, (h - s) / 2, s, s).to_image()
    };
    if s == resolution {
        cropped
    } else {
        imageops::resize(&cropped, resolution, resolution, FilterType::Triangle)
    }
}

fn listing(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let rd = std::fs::read_dir(dir)
        .map_err(|e| CliError::Dataset(format!("cannot read directory {}: {e}", dir.display())))?;
    let mut files: Vec<PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Every raster image in `dir`, ordered by file name.
pub fn ingest_dataset(dir: &Path, resolution: usize) -> Result<Dataset, CliError> {
    let mut images = Vec::new();
    let mut names = Vec::new();
    for path in listing(dir)? {
        match image::open(&path) {
            Ok(img) => {
                images.push(square(img.to_rgb8(), resolution as u32));
                names.push(path.file_name().expect("file").to_string_lossy().into_owned());
            }
            Err(e) => log::warn!("skipping unreadable image {}: {e}", path.display()),
        }
    }
    if images.is_empty() {
        return Err(CliError::Dataset(format!("no readable images in {}", dir.display())));
    }
    log::info!("ingested {} images from {}", images.len(), dir.display());
    Dataset::from_images(&images, names)
}
