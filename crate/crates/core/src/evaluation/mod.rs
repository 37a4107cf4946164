//! Evaluation over frozen models: deformation-field extraction, landmark
//! protocols, latent interpolation and alignment diagnostics.

mod landmarks;
mod regressor;

use candle_core::{DType, Tensor};

pub use landmarks::{annotate_average_texture, interocular_error, EvalReport, Protocol};
pub use regressor::{fit_landmark_regressor, FitReport, LandmarkRegressor, RegressorConfig};

use crate::data::Dataset;
use crate::error::{DaeError, Result};
use crate::imaging::Tile;
use crate::networks::{DeformingAutoencoder, ForwardOutput, LatentPart};
use crate::warp::{bilinear_sample, WarpField};

const EVAL_BATCH: usize = 64;

fn batches(n: usize) -> impl Iterator<Item = Vec<usize>> {
    (0..n)
        .step_by(EVAL_BATCH)
        .map(move |s| (s..(s + EVAL_BATCH).min(n)).collect())
}

/// Composed sampling fields `(N, H, W, 2)` for every image, in eval mode.
pub fn extract_fields(model: &DeformingAutoencoder, data: &Dataset) -> Result<WarpField> {
    let mut parts = Vec::new();
    for idx in batches(data.len()) {
        let out = model.forward(&data.batch(&idx)?, false)?;
        parts.push(out.field.grid.detach());
    }
    if parts.is_empty() {
        return Err(DaeError::invalid("no images to extract fields from"));
    }
    WarpField::new(Tensor::cat(&parts, 0)?)
}

fn check_parts(model: &DeformingAutoencoder, parts: &[LatentPart]) -> Result<()> {
    let layout = model.config().layout();
    for &p in parts {
        if p == LatentPart::Class || layout.range(p).is_none() {
            return Err(DaeError::config(format!(
                "cannot interpolate `{p}` for this variant"
            )));
        }
    }
    Ok(())
}

/// Decodes `Z = lambda Z_src + (1 - lambda) Z_tgt` on the selected parts,
/// the rest held at the source code, for lambda from 1 down to 0.
pub fn interpolate_latents(
    model: &DeformingAutoencoder,
    source: &Tensor,
    target: &Tensor,
    parts: &[LatentPart],
    steps: usize,
) -> Result<Vec<ForwardOutput>> {
    check_parts(model, parts)?;
    if steps < 2 {
        return Err(DaeError::invalid("interpolation needs at least 2 steps"));
    }
    if source.dim(0)? != 1 || target.dim(0)? != 1 {
        return Err(DaeError::invalid(
            "interpolate one source and one target image",
        ));
    }
    let zs = model.encode(source, false)?;
    let zt = model.encode(target, false)?;
    (0..steps)
        .map(|k| {
            let lambda = 1.0 - k as f64 / (steps - 1) as f64;
            let mut z = zs.clone();
            for &p in parts {
                let mix = ((zs.part(p)? * lambda)? + (zt.part(p)? * (1.0 - lambda))?)?;
                z = z.with_part(p, &mix)?;
            }
            model.decode(&z, false)
        })
        .collect()
}

/// Mirrors `(N, C, H, W)` images left to right.
pub fn mirror(images: &Tensor) -> Result<Tensor> {
    let w = images.dim(3)?;
    let idx = Tensor::from_vec((0..w as u32).rev().collect::<Vec<_>>(), w, images.device())?;
    Ok(images.index_select(&idx, 3)?)
}

/// Relighting: shading-only traversal towards the mirrored source.
pub fn relight(
    model: &DeformingAutoencoder,
    image: &Tensor,
    steps: usize,
) -> Result<Vec<ForwardOutput>> {
    interpolate_latents(model, image, &mirror(image)?, &[LatentPart::Shading], steps)
}

/// Pixelwise statistics of inputs and decoded textures.
#[derive(Debug, Clone)]
pub struct Diagnostics {
    pub channels: usize,
    pub side: usize,
    pub average_input: Vec<f32>,
    pub average_texture: Vec<f32>,
    pub input_variance: Vec<f32>,
    pub texture_variance: Vec<f32>,
    /// Labelled rows: inputs, reconstructions, textures warped by the mean
    /// field, the average input, the average texture, and the average texture
    /// placed by the mean field.
    pub panels: Vec<(String, Vec<Tile>)>,
}

impl Diagnostics {
    pub fn mean_input_variance(&self) -> f64 {
        mean(&self.input_variance)
    }

    pub fn mean_texture_variance(&self) -> f64 {
        mean(&self.texture_variance)
    }
}

fn mean(v: &[f32]) -> f64 {
    v.iter().map(|&x| x as f64).sum::<f64>() / v.len().max(1) as f64
}

struct Moments {
    sum: Vec<f64>,
    sq: Vec<f64>,
    n: usize,
}

impl Moments {
    fn new(len: usize) -> Self {
        Self {
            sum: vec![0.0; len],
            sq: vec![0.0; len],
            n: 0,
        }
    }

    fn add_batch(&mut self, t: &Tensor) -> Result<()> {
        let flat = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        let len = self.sum.len();
        for img in flat.chunks_exact(len) {
            for ((s, q), &v) in self.sum.iter_mut().zip(self.sq.iter_mut()).zip(img) {
                *s += v as f64;
                *q += (v as f64).powi(2);
            }
            self.n += 1;
        }
        Ok(())
    }

    fn mean_var(&self) -> (Vec<f32>, Vec<f32>) {
        let n = self.n as f64;
        let m: Vec<f64> = self.sum.iter().map(|s| s / n).collect();
        let v = self
            .sq
            .iter()
            .zip(&m)
            .map(|(q, m)| (q / n - m * m).max(0.0) as f32)
            .collect();
        (m.into_iter().map(|x| x as f32).collect(), v)
    }
}

/// Average input, average texture and per-pixel variances over `data`, plus
/// `shown` example columns for the panel grid.
pub fn alignment_diagnostics(
    model: &DeformingAutoencoder,
    data: &Dataset,
    shown: usize,
) -> Result<Diagnostics> {
    if data.len() < 2 {
        return Err(DaeError::invalid("diagnostics need at least two images"));
    }
    let (c, s) = (data.channels, data.side);
    let mut inputs = Moments::new(c * s * s);
    let mut textures = Moments::new(c * s * s);
    let mut fields = Vec::new();
    for idx in batches(data.len()) {
        let x = data.batch(&idx)?;
        let out = model.forward(&x, false)?;
        inputs.add_batch(&x)?;
        textures.add_batch(&out.texture)?;
        fields.push(out.field.grid.detach().sum_keepdim(0)?);
    }
    let (average_input, input_variance) = inputs.mean_var();
    let (average_texture, texture_variance) = textures.mean_var();
    let mean_grid = (Tensor::cat(&fields, 0)?.sum_keepdim(0)? / data.len() as f64)?;

    let k = shown.clamp(1, data.len());
    let idx: Vec<usize> = (0..k).collect();
    let x = data.batch(&idx)?;
    let out = model.forward(&x, false)?;
    let avg_field = WarpField::new(mean_grid.repeat((k, 1, 1, 1))?)?;
    let warped = bilinear_sample(&out.texture, &avg_field)?;
    let avg_t = Tensor::from_vec(average_texture.clone(), (1, c, s, s), x.device())?;
    let avg_placed = bilinear_sample(&avg_t, &WarpField::new(mean_grid)?)?;
    let panels = vec![
        ("INPUT".to_string(), Tile::from_batch(&x)?),
        ("RECON".to_string(), Tile::from_batch(&out.reconstruction)?),
        ("TEXTURE".to_string(), Tile::from_batch(&warped)?),
        (
            "AVG INPUT".to_string(),
            vec![Tile::new(c, s, average_input.clone())?],
        ),
        (
            "AVG TEXTURE".to_string(),
            vec![Tile::new(c, s, average_texture.clone())?],
        ),
        ("AVG PLACED".to_string(), Tile::from_batch(&avg_placed)?),
    ];
    Ok(Diagnostics {
        channels: c,
        side: s,
        average_input,
        average_texture,
        input_variance,
        texture_variance,
        panels,
    })
}

/// Per-class mean texture, in the template frame and placed in the image
/// frame by the class's mean field.
#[derive(Debug, Clone)]
pub struct ClassAverage {
    pub label: u32,
    pub texture: Tile,
    pub placed: Tile,
}

/// Class averages in label order.
pub fn class_average_textures(
    model: &DeformingAutoencoder,
    data: &Dataset,
) -> Result<Vec<ClassAverage>> {
    let labels = data
        .labels
        .as_ref()
        .ok_or_else(|| DaeError::config("dataset has no labels"))?;
    let mut classes: Vec<u32> = labels.clone();
    classes.sort_unstable();
    classes.dedup();
    let (c, s) = (data.channels, data.side);
    let mut out = Vec::new();
    for label in classes {
        let members: Vec<usize> = (0..data.len()).filter(|&i| labels[i] == label).collect();
        let mut m = Moments::new(c * s * s);
        let mut fields = Vec::new();
        for chunk in members.chunks(EVAL_BATCH) {
            let o = model.forward(&data.batch(chunk)?, false)?;
            m.add_batch(&o.texture)?;
            fields.push(o.field.grid.detach().sum_keepdim(0)?);
        }
        let mean = m.mean_var().0;
        let grid = (Tensor::cat(&fields, 0)?.sum_keepdim(0)? / members.len() as f64)?;
        let t = Tensor::from_vec(mean.clone(), (1, c, s, s), &model.device())?;
        let placed = bilinear_sample(&t, &WarpField::new(grid)?)?;
        out.push(ClassAverage {
            label,
            texture: Tile::new(c, s, mean)?,
            placed: Tile::from_batch(&placed)?.remove(0),
        });
    }
    Ok(out)
}

/// Intrinsic decomposition panels for one image: input, shading, albedo,
/// texture, shading and albedo warped into the image, reconstruction.
pub fn decompose(model: &DeformingAutoencoder, image: &Tensor) -> Result<Vec<(String, Tile)>> {
    let out = model.intrinsic_forward(image, false)?;
    let (Some(s), Some(a)) = (&out.shading, &out.albedo) else {
        return Err(DaeError::config("model has no shading/albedo decoders"));
    };
    let panels = [
        ("INPUT", image.clone()),
        ("SHADING", s.clone()),
        ("ALBEDO", a.clone()),
        ("TEXTURE", out.texture.clone()),
        ("WARPED SHADING", bilinear_sample(s, &out.field)?),
        ("WARPED ALBEDO", bilinear_sample(a, &out.field)?),
        ("RECON", out.reconstruction.clone()),
    ];
    panels
        .into_iter()
        .map(|(name, t)| Ok((name.to_string(), Tile::from_batch(&t)?.remove(0))))
        .collect()
}
