//! Sinusoidally deformed digits.
//!
//! A base glyph is resized to the working side and warped in one bilinear
//! pass by `D_x(y) = sum_k a_k sin(2 pi f_k y / H + phi_k)` and the
//! analogous `D_y(x)`, with displacements measured in output pixels.

use std::f64::consts::PI;
use std::path::Path;

use candle_core::{Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::digits::{render_digit, GLYPH_SIDE};
use super::{idx, Dataset};
use crate::error::{DaeError, Result};
use crate::warp::{bilinear_sample, WarpField};

const CHUNK: usize = 256;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DeformSpec {
    pub side: usize,
    pub num_waves: usize,
    pub amp_min: f64,
    pub amp_max: f64,
    pub freq_min: f64,
    pub freq_max: f64,
    pub seed: u64,
}

impl Default for DeformSpec {
    fn default() -> Self {
        Self {
            side: 64,
            num_waves: 2,
            amp_min: 1.0,
            amp_max: 3.0,
            freq_min: 1.0,
            freq_max: 3.0,
            seed: 0,
        }
    }
}

impl DeformSpec {
    pub fn validate(&self) -> Result<()> {
        if self.side < 2 {
            return Err(DaeError::config("side must be at least 2"));
        }
        if !(self.amp_min >= 0.0 && self.amp_min <= self.amp_max && self.amp_max.is_finite()) {
            return Err(DaeError::config(format!(
                "amplitude range [{}, {}] is invalid",
                self.amp_min, self.amp_max
            )));
        }
        if !(self.freq_min > 0.0 && self.freq_min <= self.freq_max && self.freq_max.is_finite()) {
            return Err(DaeError::config(format!(
                "frequency range [{}, {}] is invalid",
                self.freq_min, self.freq_max
            )));
        }
        Ok(())
    }

    /// Draws the warp for sample `index`. Each index owns its own RNG stream,
    /// so the result does not depend on generation order.
    pub fn sample_warp(&self, index: u64) -> SinusoidalWarp {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        let draw = |rng: &mut ChaCha8Rng| {
            (0..self.num_waves)
                .map(|_| Wave {
                    amplitude: uniform(rng, self.amp_min, self.amp_max),
                    frequency: uniform(rng, self.freq_min, self.freq_max),
                    phase: rng.random_range(0.0..2.0 * PI),
                })
                .collect::<Vec<_>>()
        };
        let x_waves = draw(&mut rng);
        let y_waves = draw(&mut rng);
        SinusoidalWarp { x_waves, y_waves }
    }
}

fn uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Wave {
    pub amplitude: f64,
    pub frequency: f64,
    pub phase: f64,
}

impl Wave {
    fn at(&self, t: f64, period: f64) -> f64 {
        self.amplitude * (2.0 * PI * self.frequency * t / period + self.phase).sin()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SinusoidalWarp {
    /// Horizontal displacement waves, driven by the row coordinate.
    pub x_waves: Vec<Wave>,
    /// Vertical displacement waves, driven by the column coordinate.
    pub y_waves: Vec<Wave>,
}

impl SinusoidalWarp {
    /// Pixel displacement at pixel position `(x, y)` of a `side`-wide image.
    pub fn displacement(&self, x: f64, y: f64, side: usize) -> (f64, f64) {
        let s = side as f64;
        let dx = self.x_waves.iter().map(|w| w.at(y, s)).sum();
        let dy = self.y_waves.iter().map(|w| w.at(x, s)).sum();
        (dx, dy)
    }

    /// Normalized sampling grid `(side, side, 2)` realising the displacement.
    pub fn grid(&self, side: usize) -> Vec<f32> {
        let scale = 2.0 / (side as f64 - 1.0);
        let mut out = Vec::with_capacity(side * side * 2);
        for i in 0..side {
            for j in 0..side {
                let (dx, dy) = self.displacement(j as f64, i as f64, side);
                out.push((-1.0 + (j as f64 + dx) * scale) as f32);
                out.push((-1.0 + (i as f64 + dy) * scale) as f32);
            }
        }
        out
    }

    pub fn field(&self, side: usize) -> Result<WarpField> {
        WarpField::new(Tensor::from_vec(
            self.grid(side),
            (1, side, side, 2),
            &Device::Cpu,
        )?)
    }
}

/// Undeformed grayscale glyphs with their digit labels.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseSet {
    pub side: usize,
    pub images: Vec<f32>,
    pub labels: Vec<u32>,
}

impl BaseSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `per_digit` rendered glyphs of each listed digit, interleaved by digit.
    pub fn procedural(digits: &[u8], per_digit: usize, seed: u64) -> Result<Self> {
        if digits.iter().any(|&d| d > 9) {
            return Err(DaeError::config("digits must lie in 0..=9"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut images = Vec::with_capacity(digits.len() * per_digit * GLYPH_SIDE * GLYPH_SIDE);
        let mut labels = Vec::new();
        for _ in 0..per_digit {
            for &d in digits {
                images.extend(render_digit(d, &mut rng));
                labels.push(d as u32);
            }
        }
        Ok(Self {
            side: GLYPH_SIDE,
            images,
            labels,
        })
    }

    /// Loads an IDX image/label pair, keeping only `digits` (all if empty)
    /// and at most `limit` samples.
    pub fn from_idx(
        images: &Path,
        labels: &Path,
        digits: &[u8],
        limit: Option<usize>,
    ) -> Result<Self> {
        let (n, rows, cols, px) = idx::read_images(images)?;
        let lab = idx::read_labels(labels)?;
        if rows != cols {
            return Err(DaeError::Format(format!(
                "expected square images, got {rows}x{cols}"
            )));
        }
        if lab.len() != n {
            return Err(DaeError::Format(format!(
                "{n} images but {} labels",
                lab.len()
            )));
        }
        let cap = limit.unwrap_or(usize::MAX);
        let mut out = Self {
            side: rows,
            images: Vec::new(),
            labels: Vec::new(),
        };
        for (k, &l) in lab.iter().enumerate() {
            if out.len() >= cap {
                break;
            }
            if digits.is_empty() || digits.contains(&l) {
                let img = &px[k * rows * cols..(k + 1) * rows * cols];
                out.images.extend(img.iter().map(|&v| v as f32 / 255.0));
                out.labels.push(l as u32);
            }
        }
        Ok(out)
    }
}

/// Warps every base glyph with its own sinusoidal field at `spec.side`.
pub fn generate_deformed_mnist(spec: &DeformSpec, base: &BaseSet) -> Result<Dataset> {
    spec.validate()?;
    if base.is_empty() {
        return Err(DaeError::invalid("base set is empty"));
    }
    let (s, b) = (spec.side, base.side);
    let mut images = Vec::with_capacity(base.len() * s * s);
    for start in (0..base.len()).step_by(CHUNK) {
        let n = CHUNK.min(base.len() - start);
        let src = Tensor::from_slice(
            &base.images[start * b * b..(start + n) * b * b],
            (n, 1, b, b),
            &Device::Cpu,
        )?;
        let mut grid = Vec::with_capacity(n * s * s * 2);
        for k in start..start + n {
            grid.extend(spec.sample_warp(k as u64).grid(s));
        }
        let field = WarpField::new(Tensor::from_vec(grid, (n, s, s, 2), &Device::Cpu)?)?;
        let out = bilinear_sample(&src, &field)?;
        images.extend(out.flatten_all()?.to_vec1::<f32>()?);
    }
    let ids = base
        .labels
        .iter()
        .enumerate()
        .map(|(k, l)| format!("digit{l}-{k:06}"))
        .collect();
    Dataset::new(images, 1, s, ids)?.with_labels(base.labels.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_amplitude_is_a_plain_resize() {
        let spec = DeformSpec {
            amp_min: 0.0,
            amp_max: 0.0,
            ..Default::default()
        };
        let w = spec.sample_warp(3);
        let g = w.grid(64);
        assert_eq!(g[0], -1.0);
        assert!((g[2 * 63] - 1.0).abs() < 1e-6);
        assert_eq!(w.displacement(10.0, 20.0, 64), (0.0, 0.0));
    }

    #[test]
    fn warps_are_per_index_deterministic() {
        let spec = DeformSpec::default();
        assert_eq!(spec.sample_warp(5), spec.sample_warp(5));
        assert_ne!(spec.sample_warp(5), spec.sample_warp(6));
        let w = spec.sample_warp(5);
        for wave in w.x_waves.iter().chain(&w.y_waves) {
            assert!((1.0..3.0).contains(&wave.amplitude));
            assert!((1.0..3.0).contains(&wave.frequency));
        }
    }

    #[test]
    fn invalid_ranges_are_rejected() {
        assert!(DeformSpec {
            amp_min: 3.0,
            amp_max: 1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(DeformSpec {
            freq_min: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(DeformSpec {
            amp_min: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn generated_set_keeps_labels_and_range() {
        let base = BaseSet::procedural(&[1, 7], 3, 0).unwrap();
        let ds = generate_deformed_mnist(&DeformSpec::default(), &base).unwrap();
        assert_eq!(ds.len(), 6);
        assert_eq!(ds.labels.as_deref(), Some(&[1, 7, 1, 7, 1, 7][..]));
        assert!(ds.images.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
