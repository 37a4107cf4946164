use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::DynamicImage;

use super::Dataset;
use crate::error::{DaeError, Result};

const EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Image files directly inside `dir`, sorted by name.
pub fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .unwrap_or_default();
        if path.is_file() && EXTENSIONS.contains(&ext.as_str()) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Centre-crops to a square, resizes to `side` and returns `(C, side, side)`
/// values in `[0, 1]`.
pub fn load_image(path: &Path, side: usize, channels: usize) -> Result<Vec<f32>> {
    let img = image::open(path)?;
    Ok(prepare(&img, side, channels))
}

fn prepare(img: &DynamicImage, side: usize, channels: usize) -> Vec<f32> {
    let (w, h) = (img.width(), img.height());
    let s = w.min(h);
    let cropped = img.crop_imm((w - s) / 2, (h - s) / 2, s, s);
    let resized = cropped.resize_exact(side as u32, side as u32, FilterType::Triangle);
    let plane = side * side;
    if channels == 1 {
        resized
            .to_luma8()
            .into_raw()
            .into_iter()
            .map(|v| v as f32 / 255.0)
            .collect()
    } else {
        let rgb = resized.to_rgb8().into_raw();
        let mut out = vec![0f32; 3 * plane];
        for (p, px) in rgb.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * plane + p] = px[c] as f32 / 255.0;
            }
        }
        out
    }
}

/// Loads every readable image in `dir`. Undecodable files are skipped with a
/// warning; ids are file names.
pub fn load_image_folder(dir: &Path, side: usize, channels: usize) -> Result<Dataset> {
    if channels != 1 && channels != 3 {
        return Err(DaeError::config(format!(
            "channels must be 1 or 3, got {channels}"
        )));
    }
    let mut images = Vec::new();
    let mut ids = Vec::new();
    for path in image_files(dir)? {
        match load_image(&path, side, channels) {
            Ok(v) => {
                images.extend(v);
                ids.push(
                    path.file_name()
                        .unwrap_or_default()
                        .to_string_lossy()
                        .into_owned(),
                );
            }
            Err(e) => log::warn!("skipping {}: {e}", path.display()),
        }
    }
    if ids.is_empty() {
        return Err(DaeError::invalid(format!(
            "no readable images in {}",
            dir.display()
        )));
    }
    Dataset::new(images, channels, side, ids)
}
