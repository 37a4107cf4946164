//! On-disk dataset cache: raw little-endian f32 pixels plus a JSON manifest.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Dataset, LandmarkSet};
use crate::error::{DaeError, Result};

const MANIFEST: &str = "manifest.json";
const PIXELS: &str = "images.f32";
const CACHE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheManifest {
    pub version: u32,
    pub spec_hash: String,
    pub channels: usize,
    pub side: usize,
    pub ids: Vec<String>,
    #[serde(default)]
    pub labels: Option<Vec<u32>>,
    #[serde(default)]
    pub landmarks: Option<Vec<LandmarkSet>>,
    /// Split name per sample, when the cache was written with one.
    #[serde(default)]
    pub split: Option<Vec<String>>,
}

/// SHA-256 of the canonical JSON form of `value`.
pub fn hash_json<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

pub fn write_cache(
    dir: &Path,
    ds: &Dataset,
    spec_hash: &str,
    split: Option<Vec<String>>,
) -> Result<()> {
    if split.as_ref().is_some_and(|s| s.len() != ds.len()) {
        return Err(DaeError::invalid("split names must cover every sample"));
    }
    std::fs::create_dir_all(dir)?;
    let bytes: Vec<u8> = ds.images.iter().flat_map(|v| v.to_le_bytes()).collect();
    std::fs::write(dir.join(PIXELS), bytes)?;
    let manifest = CacheManifest {
        version: CACHE_VERSION,
        spec_hash: spec_hash.to_string(),
        channels: ds.channels,
        side: ds.side,
        ids: ds.ids.clone(),
        labels: ds.labels.clone(),
        landmarks: ds.landmarks.clone(),
        split,
    };
    std::fs::write(dir.join(MANIFEST), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

/// Reads a cache. With `expect_hash`, a cache built from a different spec
/// yields `Ok(None)` so the caller can regenerate.
pub fn read_cache(
    dir: &Path,
    expect_hash: Option<&str>,
) -> Result<Option<(Dataset, CacheManifest)>> {
    let mpath = dir.join(MANIFEST);
    if !mpath.exists() {
        return Ok(None);
    }
    let manifest: CacheManifest = serde_json::from_slice(&std::fs::read(&mpath)?)?;
    if manifest.version != CACHE_VERSION {
        return Err(DaeError::Format(format!(
            "unsupported cache version {}",
            manifest.version
        )));
    }
    if expect_hash.is_some_and(|h| h != manifest.spec_hash) {
        return Ok(None);
    }
    let bytes = std::fs::read(dir.join(PIXELS))?;
    if bytes.len() % 4 != 0 {
        return Err(DaeError::Format(
            "pixel file length is not a multiple of 4".into(),
        ));
    }
    let images = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let mut ds = Dataset::new(
        images,
        manifest.channels,
        manifest.side,
        manifest.ids.clone(),
    )?;
    ds.labels = manifest.labels.clone();
    ds.landmarks = manifest.landmarks.clone();
    Ok(Some((ds, manifest)))
}
