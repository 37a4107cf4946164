//! Datasets: deformed digits, synthetic shaded faces, image folders with
//! landmark annotations, deterministic splits and an on-disk cache.

mod cache;
mod deform;
pub mod digits;
mod faces;
mod folder;
pub mod idx;
mod landmarks;
mod split;

use candle_core::{Device, Tensor};

pub use cache::{hash_json, read_cache, write_cache, CacheManifest};
pub use deform::{generate_deformed_mnist, BaseSet, DeformSpec, SinusoidalWarp, Wave};
pub use faces::{FaceSpec, SyntheticFaces, TEMPLATE_LANDMARKS};
pub use folder::{image_files, load_image, load_image_folder};
pub use landmarks::{
    load_landmarks, parse_landmarks, CropFrame, LandmarkFile, LandmarkOrder, LandmarkSet,
};
pub use split::split;

use crate::error::{DaeError, Result};

/// Images stored as `(N, C, side, side)` f32 in `[0, 1]`, with optional labels
/// and landmarks aligned by index.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<f32>,
    pub channels: usize,
    pub side: usize,
    pub ids: Vec<String>,
    pub labels: Option<Vec<u32>>,
    pub landmarks: Option<Vec<LandmarkSet>>,
}

impl Dataset {
    pub fn new(images: Vec<f32>, channels: usize, side: usize, ids: Vec<String>) -> Result<Self> {
        if images.len() != ids.len() * channels * side * side {
            return Err(DaeError::invalid(format!(
                "{} values do not hold {} images of {channels}x{side}x{side}",
                images.len(),
                ids.len()
            )));
        }
        Ok(Self {
            images,
            channels,
            side,
            ids,
            labels: None,
            landmarks: None,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn image_len(&self) -> usize {
        self.channels * self.side * self.side
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    /// Stacks the selected images into an `(B, C, side, side)` tensor.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            if i >= self.len() {
                return Err(DaeError::invalid(format!(
                    "index {i} out of range for {} images",
                    self.len()
                )));
            }
            data.extend_from_slice(self.image(i));
        }
        Ok(Tensor::from_vec(
            data,
            (indices.len(), self.channels, self.side, self.side),
            &Device::Cpu,
        )?)
    }

    pub fn label_batch(&self, indices: &[usize]) -> Result<Tensor> {
        let labels = self
            .labels
            .as_ref()
            .ok_or_else(|| DaeError::config("dataset has no class labels"))?;
        let v: Vec<u32> = indices.iter().map(|&i| labels[i]).collect();
        Ok(Tensor::from_vec(v, indices.len(), &Device::Cpu)?)
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut images = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        Self {
            images,
            channels: self.channels,
            side: self.side,
            ids: indices.iter().map(|&i| self.ids[i].clone()).collect(),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            landmarks: self
                .landmarks
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
        }
    }

    /// Per-pixel mean image.
    pub fn mean_image(&self) -> Vec<f32> {
        let n = self.image_len();
        let mut acc = vec![0f64; n];
        for i in 0..self.len() {
            for (a, &v) in acc.iter_mut().zip(self.image(i)) {
                *a += v as f64;
            }
        }
        let count = self.len().max(1) as f64;
        acc.into_iter().map(|a| (a / count) as f32).collect()
    }

    pub fn with_labels(mut self, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(DaeError::invalid("label count does not match image count"));
        }
        self.labels = Some(labels);
        Ok(self)
    }
}
