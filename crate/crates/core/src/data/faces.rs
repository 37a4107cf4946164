//! Synthetic shaded faces with known warps and landmarks.
//!
//! A cartoon face albedo is lit by a smooth Lambertian bump, giving the
//! texture `S * A` in the template frame. Each sample then views the texture
//! through `W(p) = theta [p + D(p); 1]`, a random similarity composed with a
//! gentle sinusoidal displacement. Landmarks are the template points pulled
//! back through `W` by fixed-point iteration.

use std::f64::consts::PI;

use candle_core::{Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::deform::{SinusoidalWarp, Wave};
use super::{Dataset, LandmarkSet};
use crate::error::{DaeError, Result};
use crate::warp::{bilinear_sample, WarpField};

pub const FACE_SIDE: usize = 64;

pub const TEMPLATE_LANDMARKS: LandmarkSet = LandmarkSet {
    points: [
        [22.0, 29.0],
        [42.0, 29.0],
        [32.0, 40.0],
        [25.0, 47.0],
        [39.0, 47.0],
    ],
};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct FaceSpec {
    pub count: usize,
    pub seed: u64,
    pub max_rotation_deg: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Maximum translation in normalized units.
    pub max_shift: f64,
    /// Maximum sinusoidal amplitude in pixels.
    pub max_wave_px: f64,
    pub max_azimuth_deg: f64,
    pub albedo_jitter: f64,
}

impl Default for FaceSpec {
    fn default() -> Self {
        Self {
            count: 256,
            seed: 0,
            max_rotation_deg: 8.0,
            scale_min: 0.92,
            scale_max: 1.08,
            max_shift: 0.06,
            max_wave_px: 1.5,
            max_azimuth_deg: 50.0,
            albedo_jitter: 0.1,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticFaces {
    /// RGB images with landmarks in 64-pixel coordinates.
    pub dataset: Dataset,
    /// Ground-truth sampling grids, `(N, 64, 64, 2)`.
    pub fields: Vec<f32>,
    /// Template-frame shading `(N, 1, 64, 64)` and albedo `(N, 3, 64, 64)`.
    pub shading: Vec<f32>,
    pub albedo: Vec<f32>,
}

struct Pose {
    theta: [[f64; 3]; 2],
    waves: SinusoidalWarp,
}

impl Pose {
    fn to_norm(px: f64) -> f64 {
        -1.0 + 2.0 * px / (FACE_SIDE as f64 - 1.0)
    }

    fn to_px(n: f64) -> f64 {
        (n + 1.0) * (FACE_SIDE as f64 - 1.0) / 2.0
    }

    /// Normalized template coordinate seen at pixel `(x, y)`.
    fn apply(&self, x: f64, y: f64) -> [f64; 2] {
        let (dx, dy) = self.waves.displacement(x, y, FACE_SIDE);
        let (u, v) = (Self::to_norm(x + dx), Self::to_norm(y + dy));
        let t = &self.theta;
        [
            t[0][0] * u + t[0][1] * v + t[0][2],
            t[1][0] * u + t[1][1] * v + t[1][2],
        ]
    }

    /// Pixel whose sample lands on template pixel `q`.
    fn pull_back(&self, q: [f64; 2]) -> [f64; 2] {
        let t = &self.theta;
        let (a, b, c, d) = (t[0][0], t[0][1], t[1][0], t[1][1]);
        let det = a * d - b * c;
        let (qx, qy) = (Self::to_norm(q[0]) - t[0][2], Self::to_norm(q[1]) - t[1][2]);
        let r = [
            Self::to_px((d * qx - b * qy) / det),
            Self::to_px((a * qy - c * qx) / det),
        ];
        let mut p = r;
        for _ in 0..100 {
            let (dx, dy) = self.waves.displacement(p[0], p[1], FACE_SIDE);
            let next = [r[0] - dx, r[1] - dy];
            let moved = (next[0] - p[0]).abs() + (next[1] - p[1]).abs();
            p = next;
            if moved < 1e-12 {
                break;
            }
        }
        p
    }
}

fn soft_ellipse(x: f64, y: f64, cx: f64, cy: f64, rx: f64, ry: f64) -> f64 {
    let r = (((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2)).sqrt();
    (0.5 - (r - 1.0) * rx.min(ry)).clamp(0.0, 1.0)
}

fn paint(px: &mut [f64; 3], colour: [f64; 3], alpha: f64) {
    for c in 0..3 {
        px[c] += alpha * (colour[c] - px[c]);
    }
}

fn albedo_template<R: Rng>(rng: &mut R, jitter: f64) -> Vec<f32> {
    let tone: Vec<f64> = (0..3)
        .map(|_| 1.0 + rng.random_range(-jitter..=jitter))
        .collect();
    let skin = [0.86 * tone[0], 0.66 * tone[1], 0.52 * tone[2]];
    let hair_shade = rng.random_range(0.12..0.4);
    let hair = [hair_shade, hair_shade * 0.75, hair_shade * 0.5];
    let plane = FACE_SIDE * FACE_SIDE;
    let mut out = vec![0f32; 3 * plane];
    for i in 0..FACE_SIDE {
        for j in 0..FACE_SIDE {
            let (x, y) = (j as f64, i as f64);
            let mut px = [0.3, 0.34, 0.4];
            paint(&mut px, hair, soft_ellipse(x, y, 32.0, 24.0, 23.0, 19.0));
            paint(&mut px, skin, soft_ellipse(x, y, 32.0, 35.0, 19.0, 23.0));
            for &ex in &[22.0, 42.0] {
                paint(
                    &mut px,
                    [0.95, 0.95, 0.95],
                    soft_ellipse(x, y, ex, 29.0, 4.5, 2.6),
                );
                paint(
                    &mut px,
                    [0.12, 0.1, 0.08],
                    soft_ellipse(x, y, ex, 29.0, 2.0, 2.0),
                );
                paint(&mut px, hair, soft_ellipse(x, y, ex, 24.5, 5.0, 1.2));
            }
            paint(
                &mut px,
                [skin[0] * 0.82, skin[1] * 0.8, skin[2] * 0.8],
                soft_ellipse(x, y, 32.0, 36.5, 2.5, 3.8),
            );
            paint(
                &mut px,
                [0.72, 0.2, 0.22],
                soft_ellipse(x, y, 32.0, 47.0, 7.0, 2.2),
            );
            for c in 0..3 {
                out[c * plane + i * FACE_SIDE + j] = px[c].clamp(0.0, 1.0) as f32;
            }
        }
    }
    out
}

/// Lambertian shading of a Gaussian height bump under a directional light.
pub fn bump_shading(azimuth: f64, elevation: f64) -> Vec<f32> {
    let (height, sx, sy) = (20.0, 14.0, 18.0);
    let light = [
        azimuth.sin() * elevation.cos(),
        -elevation.sin(),
        azimuth.cos() * elevation.cos(),
    ];
    let mut out = Vec::with_capacity(FACE_SIDE * FACE_SIDE);
    for i in 0..FACE_SIDE {
        for j in 0..FACE_SIDE {
            let (u, v) = (j as f64 - 32.0, i as f64 - 34.0);
            let h = height * (-(u * u) / (2.0 * sx * sx) - (v * v) / (2.0 * sy * sy)).exp();
            let (hx, hy) = (-h * u / (sx * sx), -h * v / (sy * sy));
            let norm = (hx * hx + hy * hy + 1.0).sqrt();
            let n = [-hx / norm, -hy / norm, 1.0 / norm];
            let lambert = (n[0] * light[0] + n[1] * light[1] + n[2] * light[2]).max(0.0);
            out.push((0.3 + 0.7 * lambert).min(1.0) as f32);
        }
    }
    out
}

impl SyntheticFaces {
    pub fn generate(spec: &FaceSpec) -> Result<Self> {
        if spec.count == 0 || spec.scale_min <= 0.0 || spec.scale_min > spec.scale_max {
            return Err(DaeError::config(
                "face spec needs a positive count and a valid scale range",
            ));
        }
        let n = spec.count;
        let plane = FACE_SIDE * FACE_SIDE;
        let mut textures = Vec::with_capacity(n * 3 * plane);
        let mut shading = Vec::with_capacity(n * plane);
        let mut albedo = Vec::with_capacity(n * 3 * plane);
        let mut fields = Vec::with_capacity(n * plane * 2);
        let mut landmarks = Vec::with_capacity(n);
        for k in 0..n {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(k as u64);
            let a = albedo_template(&mut rng, spec.albedo_jitter);
            let az = rng
                .random_range(-spec.max_azimuth_deg..=spec.max_azimuth_deg)
                .to_radians();
            let el = rng.random_range(-10.0f64..20.0).to_radians();
            let s = bump_shading(az, el);
            for c in 0..3 {
                textures.extend(
                    a[c * plane..(c + 1) * plane]
                        .iter()
                        .zip(&s)
                        .map(|(a, s)| a * s),
                );
            }
            let pose = random_pose(&mut rng, spec);
            for i in 0..FACE_SIDE {
                for j in 0..FACE_SIDE {
                    let g = pose.apply(j as f64, i as f64);
                    fields.extend([g[0] as f32, g[1] as f32]);
                }
            }
            let mut lm = TEMPLATE_LANDMARKS;
            for p in lm.points.iter_mut() {
                *p = pose.pull_back(*p);
            }
            landmarks.push(lm);
            shading.extend(s);
            albedo.extend(a);
        }
        let src = Tensor::from_vec(textures, (n, 3, FACE_SIDE, FACE_SIDE), &Device::Cpu)?;
        let field = WarpField::new(Tensor::from_slice(
            &fields,
            (n, FACE_SIDE, FACE_SIDE, 2),
            &Device::Cpu,
        )?)?;
        let images = bilinear_sample(&src, &field)?
            .flatten_all()?
            .to_vec1::<f32>()?;
        let ids = (0..n).map(|k| format!("face-{k:06}")).collect();
        let mut dataset = Dataset::new(images, 3, FACE_SIDE, ids)?;
        dataset.landmarks = Some(landmarks);
        Ok(Self {
            dataset,
            fields,
            shading,
            albedo,
        })
    }
}

fn random_pose<R: Rng>(rng: &mut R, spec: &FaceSpec) -> Pose {
    let rot = rng
        .random_range(-spec.max_rotation_deg..=spec.max_rotation_deg)
        .to_radians();
    let scale = rng.random_range(spec.scale_min..=spec.scale_max);
    let (tx, ty) = (
        rng.random_range(-spec.max_shift..=spec.max_shift),
        rng.random_range(-spec.max_shift..=spec.max_shift),
    );
    let (c, s) = (rot.cos() * scale, rot.sin() * scale);
    let wave = |rng: &mut R| Wave {
        amplitude: rng.random_range(0.0..=spec.max_wave_px),
        frequency: rng.random_range(1.0..2.0),
        phase: rng.random_range(0.0..2.0 * PI),
    };
    let waves = SinusoidalWarp {
        x_waves: vec![wave(rng)],
        y_waves: vec![wave(rng)],
    };
    Pose {
        theta: [[c, -s, tx], [s, c, ty]],
        waves,
    }
}
