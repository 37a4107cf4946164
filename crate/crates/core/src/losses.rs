//! Training objectives: reconstruction, warp regularisers, shading
//! smoothness, least-squares adversarial terms and class cross-entropy.
//!
//! `smooth_tv`, `bias_reduce` and `shade_smooth` return values already
//! multiplied by their weight; `aggregate` applies the adversarial and class
//! weights itself.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{DaeError, Result};
use crate::networks::{PatchDiscriminator, Variant};
use crate::warp::{mean_field, AffineParams, DifferentialWarp, WarpField};

/// How the regularisers collapse over pixels and batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Mean,
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub smooth: f64,
    pub bias_affine: f64,
    pub bias_field: f64,
    pub shade: f64,
    pub adversarial: f64,
    pub class: f64,
    pub reduction: Reduction,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            smooth: 1e-6,
            bias_affine: 0.01,
            bias_field: 0.01,
            shade: 1e-6,
            adversarial: 0.1,
            class: 1.0,
            reduction: Reduction::Mean,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.smooth,
            self.bias_affine,
            self.bias_field,
            self.shade,
            self.adversarial,
            self.class,
        ];
        if all.iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(DaeError::config(
                "loss weights must be finite and non-negative",
            ))
        }
    }
}

fn reduce(t: &Tensor, r: Reduction) -> Result<Tensor> {
    Ok(match r {
        Reduction::Mean => t.mean_all()?,
        Reduction::Sum => t.sum_all()?,
    })
}

fn forward_diff(t: &Tensor, dim: usize) -> Result<Tensor> {
    let n = t.dim(dim)?;
    Ok((t.narrow(dim, 1, n - 1)? - t.narrow(dim, 0, n - 1)?)?)
}

/// Mean squared error over every element.
pub fn recon_l2(output: &Tensor, input: &Tensor) -> Result<Tensor> {
    if output.dims() != input.dims() {
        return Err(DaeError::invalid(format!(
            "reconstruction shape {:?} differs from input {:?}",
            output.dims(),
            input.dims()
        )));
    }
    Ok((output - input)?.sqr()?.mean_all()?)
}

/// Anisotropic L1 total variation of `(N, K, H, W)` maps, summed over the
/// two axes; each directional term is reduced separately.
pub fn total_variation(maps: &Tensor, reduction: Reduction) -> Result<Tensor> {
    maps.dims4()?;
    let dx = reduce(&forward_diff(maps, 3)?.abs()?, reduction)?;
    let dy = reduce(&forward_diff(maps, 2)?.abs()?, reduction)?;
    Ok((dx + dy)?)
}

/// `lambda * (|grad dx|_1 + |grad dy|_1)` over the increment maps.
pub fn smooth_tv(d: &DifferentialWarp, lambda: f64, reduction: Reduction) -> Result<Tensor> {
    let dx = total_variation(&d.dx.unsqueeze(1)?, reduction)?;
    let dy = total_variation(&d.dy.unsqueeze(1)?, reduction)?;
    Ok(((dx + dy)? * lambda)?)
}

/// `l_a |mean(S_A) - S_0|^2 + l_w |mean(W) - W_0|^2` over a minibatch.
///
/// Only the batch averages are penalised; individual samples may deviate.
pub fn bias_reduce(
    affine: &AffineParams,
    fields: &WarpField,
    weights: &LossWeights,
) -> Result<Tensor> {
    let theta = affine.mean()?.theta;
    let s0 = AffineParams::identity(1, theta.dtype(), theta.device())?.theta;
    let affine_term = reduce(&(theta - s0)?.sqr()?, weights.reduction)?;
    let mean = mean_field(fields)?;
    let (_, h, w) = mean.dims();
    let w0 = WarpField::identity(1, h, w, mean.grid.dtype(), mean.grid.device())?;
    let field_term = reduce(&(mean.grid - w0.grid)?.sqr()?, weights.reduction)?;
    Ok(((affine_term * weights.bias_affine)? + (field_term * weights.bias_field)?)?)
}

/// `lambda * |grad S|^2` with forward differences along both axes.
pub fn shade_smooth(shading: &Tensor, lambda: f64, reduction: Reduction) -> Result<Tensor> {
    shading.dims4()?;
    let gx = reduce(&forward_diff(shading, 3)?.sqr()?, reduction)?;
    let gy = reduce(&forward_diff(shading, 2)?.sqr()?, reduction)?;
    Ok(((gx + gy)? * lambda)?)
}

/// Least-squares GAN objectives on patch logits.
#[derive(Debug, Clone)]
pub struct AdversarialTerms {
    /// `0.5 * mean((D(fake) - 1)^2)`, differentiable w.r.t. the generator.
    pub generator: Tensor,
    /// `0.5 * (mean((D(real) - 1)^2) + mean(D(fake)^2))` with `fake` detached.
    pub discriminator: Tensor,
}

pub fn lsgan_generator(fake_logits: &Tensor) -> Result<Tensor> {
    Ok(((fake_logits - 1.0)?.sqr()?.mean_all()? * 0.5)?)
}

pub fn lsgan_discriminator(real_logits: &Tensor, fake_logits: &Tensor) -> Result<Tensor> {
    let real = (real_logits - 1.0)?.sqr()?.mean_all()?;
    let fake = fake_logits.sqr()?.mean_all()?;
    Ok(((real + fake)? * 0.5)?)
}

/// Runs the discriminator on both image sets and returns both objectives.
pub fn adversarial_pair(
    disc: Option<&PatchDiscriminator>,
    fake: &Tensor,
    real: &Tensor,
    train: bool,
) -> Result<AdversarialTerms> {
    let disc =
        disc.ok_or_else(|| DaeError::config("adversarial loss requested without a discriminator"))?;
    let real_logits = disc.forward(real, train)?;
    let fake_detached = disc.forward(&fake.detach(), train)?;
    let fake_logits = disc.forward(fake, train)?;
    Ok(AdversarialTerms {
        generator: lsgan_generator(&fake_logits)?,
        discriminator: lsgan_discriminator(&real_logits, &fake_detached)?,
    })
}

/// Mean softmax cross-entropy of `(N, K)` logits against `u32` labels.
pub fn class_cross_entropy(logits: &Tensor, labels: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::loss::cross_entropy(logits, labels)?)
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy(logits: &Tensor, labels: &Tensor) -> Result<f64> {
    let pred = logits.argmax(D::Minus1)?.to_vec1::<u32>()?;
    let truth = labels.to_vec1::<u32>()?;
    if pred.is_empty() {
        return Ok(0.0);
    }
    let hits = pred.iter().zip(&truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Loss components produced by one forward pass.
#[derive(Debug, Clone, Default)]
pub struct LossParts {
    pub recon: Option<Tensor>,
    pub smooth: Option<Tensor>,
    pub bias: Option<Tensor>,
    pub shade: Option<Tensor>,
    pub adv_g: Option<Tensor>,
    pub adv_d: Option<f64>,
    pub ce: Option<Tensor>,
}

/// One metrics row; column order matches the CSV header.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub total: f64,
    pub recon: f64,
    pub smooth: f64,
    pub bias: f64,
    pub shade: f64,
    pub adv_g: f64,
    pub adv_d: f64,
    pub ce: f64,
}

impl LossReport {
    pub const HEADER: [&'static str; 9] = [
        "step", "total", "recon", "smooth", "bias", "shade", "adv_g", "adv_d", "ce",
    ];

    pub fn is_finite(&self) -> bool {
        [
            self.total,
            self.recon,
            self.smooth,
            self.bias,
            self.shade,
            self.adv_g,
            self.adv_d,
            self.ce,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone)]
pub struct Aggregate {
    pub total: Tensor,
    pub report: LossReport,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}

fn require<'a>(t: &'a Option<Tensor>, name: &str) -> Result<&'a Tensor> {
    t.as_ref().ok_or_else(|| {
        DaeError::config(format!("loss component `{name}` missing for this variant"))
    })
}

/// Sums the components required by `variant`:
/// recon + smooth + bias, plus `class * ce` (class-aware), plus shade
/// (intrinsic), plus `adversarial * adv_g` when `adversarial` is set.
pub fn aggregate(
    variant: Variant,
    adversarial: bool,
    parts: &LossParts,
    weights: &LossWeights,
) -> Result<Aggregate> {
    let recon = require(&parts.recon, "recon")?;
    let smooth = require(&parts.smooth, "smooth")?;
    let bias = require(&parts.bias, "bias")?;
    let mut total = ((recon + smooth)? + bias)?;
    let mut report = LossReport {
        recon: scalar(recon)?,
        smooth: scalar(smooth)?,
        bias: scalar(bias)?,
        ..Default::default()
    };
    if variant == Variant::ClassAware {
        let ce = require(&parts.ce, "ce")?;
        total = (total + (ce * weights.class)?)?;
        report.ce = scalar(ce)?;
    }
    if variant == Variant::Intrinsic {
        let shade = require(&parts.shade, "shade")?;
        total = (total + shade)?;
        report.shade = scalar(shade)?;
    }
    if adversarial {
        let g = require(&parts.adv_g, "adv_g")?;
        total = (total + (g * weights.adversarial)?)?;
        report.adv_g = scalar(g)?;
        report.adv_d = parts.adv_d.unwrap_or(0.0);
    }
    report.total = scalar(&total)?;
    Ok(Aggregate { total, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn dev() -> Device {
        Device::Cpu
    }

    #[test]
    fn recon_basics() -> Result<()> {
        let a = Tensor::zeros((2, 1, 4, 4), DType::F32, &dev())?;
        let b = Tensor::ones((2, 1, 4, 4), DType::F32, &dev())?;
        assert_eq!(recon_l2(&a, &a)?.to_scalar::<f32>()?, 0.0);
        assert_eq!(recon_l2(&a, &b)?.to_scalar::<f32>()?, 1.0);
        assert!(recon_l2(&a, &Tensor::ones((2, 1, 4, 5), DType::F32, &dev())?).is_err());
        Ok(())
    }

    #[test]
    fn one_unit_step_along_a_64_pixel_edge() -> Result<()> {
        // dx is 0 in the top half and 1 in the bottom half: 64 unit jumps along y.
        let mut v = vec![0f64; 64 * 64];
        v[32 * 64..].iter_mut().for_each(|x| *x = 1.0);
        let dx = Tensor::from_vec(v, (1, 64, 64), &dev())?;
        let dy = Tensor::zeros((1, 64, 64), DType::F64, &dev())?;
        let d = DifferentialWarp::new(dx, dy)?;
        let sum = smooth_tv(&d, 1e-6, Reduction::Sum)?.to_scalar::<f64>()?;
        assert!((sum - 1e-6 * 64.0).abs() < 1e-15);
        // mean over the 63 x 64 vertical differences
        let mean = smooth_tv(&d, 1e-6, Reduction::Mean)?.to_scalar::<f64>()?;
        assert!((mean - 1e-6 / 63.0).abs() < 1e-15);
        Ok(())
    }

    #[test]
    fn constant_maps_are_penalty_free() -> Result<()> {
        let d = DifferentialWarp::identity(2, 8, 8, DType::F32, &dev())?;
        assert_eq!(
            smooth_tv(&d, 1e-6, Reduction::Mean)?.to_scalar::<f32>()?,
            0.0
        );
        let s = Tensor::full(0.7f32, (2, 1, 8, 8), &dev())?;
        assert_eq!(
            shade_smooth(&s, 1e-6, Reduction::Sum)?.to_scalar::<f32>()?,
            0.0
        );
        Ok(())
    }

    #[test]
    fn bias_reduce_ignores_symmetric_deviation() -> Result<()> {
        let w0 = WarpField::identity(1, 8, 8, DType::F64, &dev())?;
        let c = Tensor::full(0.1f64, (1, 8, 8, 2), &dev())?;
        let batch = WarpField::new(Tensor::cat(&[(&w0.grid + &c)?, (&w0.grid - &c)?], 0)?)?;
        let s0 = AffineParams::identity(2, DType::F64, &dev())?;
        let v = bias_reduce(&s0, &batch, &LossWeights::default())?.to_scalar::<f64>()?;
        assert!(v.abs() < 1e-15);
        Ok(())
    }

    #[test]
    fn discriminator_term_vanishes_at_targets() -> Result<()> {
        let ones = Tensor::ones((2, 1, 8, 8), DType::F32, &dev())?;
        let zeros = ones.zeros_like()?;
        assert_eq!(lsgan_discriminator(&ones, &zeros)?.to_scalar::<f32>()?, 0.0);
        assert_eq!(lsgan_generator(&ones)?.to_scalar::<f32>()?, 0.0);
        Ok(())
    }

    #[test]
    fn aggregate_rejects_missing_components() -> Result<()> {
        let z = Tensor::new(0.5f32, &dev())?;
        let parts = LossParts {
            recon: Some(z.clone()),
            smooth: Some(z.clone()),
            bias: Some(z.clone()),
            ..Default::default()
        };
        let w = LossWeights::default();
        assert!(aggregate(Variant::Dae, false, &parts, &w).is_ok());
        assert!(aggregate(Variant::ClassAware, false, &parts, &w).is_err());
        assert!(aggregate(Variant::Intrinsic, false, &parts, &w).is_err());
        assert!(aggregate(Variant::Dae, true, &parts, &w).is_err());
        assert!(adversarial_pair(None, &z, &z, true).is_err());
        Ok(())
    }

    #[test]
    fn negative_weights_rejected() {
        let w = LossWeights {
            smooth: -1.0,
            ..Default::default()
        };
        assert!(w.validate().is_err());
    }
}
