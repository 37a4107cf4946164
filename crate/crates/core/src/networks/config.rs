use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{DaeError, Result};

/// Input side length the architectures are built for.
pub const IMAGE_SIDE: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Dae,
    ClassAware,
    Intrinsic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    Conv,
    Dense,
}

/// Which warp branches are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Deformation {
    Affine,
    Integral,
    AffineIntegral,
}

impl Deformation {
    pub fn uses_affine(self) -> bool {
        matches!(self, Deformation::Affine | Deformation::AffineIntegral)
    }

    pub fn uses_local(self) -> bool {
        matches!(self, Deformation::Integral | Deformation::AffineIntegral)
    }
}

macro_rules! impl_from_str {
    ($ty:ty { $($name:literal => $val:expr),+ $(,)? }) => {
        impl FromStr for $ty {
            type Err = DaeError;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($val),)+
                    other => Err(DaeError::config(format!(
                        concat!("unknown ", stringify!($ty), " `{}`"), other
                    ))),
                }
            }
        }
    };
}

impl_from_str!(Variant { "dae" => Variant::Dae, "class_aware" => Variant::ClassAware, "class-aware" => Variant::ClassAware, "intrinsic" => Variant::Intrinsic });
impl_from_str!(Backbone { "conv" => Backbone::Conv, "dense" => Backbone::Dense });
impl_from_str!(Deformation { "affine" => Deformation::Affine, "integral" => Deformation::Integral, "affine_integral" => Deformation::AffineIntegral });

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub variant: Variant,
    pub backbone: Backbone,
    pub image_side: usize,
    pub channels: usize,
    pub z_texture: usize,
    pub z_class: usize,
    pub z_affine: usize,
    pub z_warp: usize,
    pub z_shading: usize,
    pub z_albedo: usize,
    pub num_classes: usize,
    pub use_adversarial: bool,
    /// Decode an additive offset to the identity grid instead of increments.
    pub residual_grid: bool,
    pub deformation: Deformation,
    /// Width multiplier; 32 reproduces the published layer widths.
    pub base_filters: usize,
    pub shading_channels: usize,
    pub leaky_slope: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Dae,
            backbone: Backbone::Conv,
            image_side: IMAGE_SIDE,
            channels: 1,
            z_texture: 32,
            z_class: 0,
            z_affine: 32,
            z_warp: 32,
            z_shading: 16,
            z_albedo: 16,
            num_classes: 0,
            use_adversarial: false,
            residual_grid: false,
            deformation: Deformation::AffineIntegral,
            base_filters: 32,
            shading_channels: 1,
            leaky_slope: 0.2,
        }
    }
}

impl ModelConfig {
    pub fn class_aware(num_classes: usize, z_class: usize) -> Self {
        Self {
            variant: Variant::ClassAware,
            num_classes,
            z_class,
            ..Self::default()
        }
    }

    /// Intrinsic variant with 16-d shading, 16-d albedo and 128-d warp codes.
    pub fn intrinsic(channels: usize) -> Self {
        Self {
            variant: Variant::Intrinsic,
            channels,
            z_texture: 0,
            z_shading: 16,
            z_albedo: 16,
            z_warp: 128,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_side != IMAGE_SIDE {
            return Err(DaeError::config(format!(
                "image_side must be {IMAGE_SIDE}, got {}",
                self.image_side
            )));
        }
        if self.channels == 0 || self.base_filters == 0 {
            return Err(DaeError::config(
                "channels and base_filters must be positive",
            ));
        }
        if !(self.leaky_slope.is_finite() && self.leaky_slope >= 0.0) {
            return Err(DaeError::config(
                "leaky_slope must be a non-negative number",
            ));
        }
        match self.variant {
            Variant::ClassAware => {
                if self.num_classes < 2 || self.z_class == 0 {
                    return Err(DaeError::config(
                        "class_aware needs num_classes >= 2 and z_class >= 1",
                    ));
                }
            }
            Variant::Dae | Variant::Intrinsic => {
                if self.z_class != 0 {
                    return Err(DaeError::config(
                        "z_class is only meaningful for class_aware",
                    ));
                }
            }
        }
        if self.variant == Variant::Intrinsic
            && self.shading_channels != 1
            && self.shading_channels != self.channels
        {
            return Err(DaeError::config(
                "shading_channels must be 1 or equal to channels",
            ));
        }
        if self.deformation.uses_affine() && self.z_affine == 0 {
            return Err(DaeError::config("affine branch needs z_affine >= 1"));
        }
        if self.deformation.uses_local() && self.z_warp == 0 {
            return Err(DaeError::config("local warp branch needs z_warp >= 1"));
        }
        if self.layout().total() == 0 {
            return Err(DaeError::config("latent code is empty"));
        }
        Ok(())
    }

    pub fn layout(&self) -> LatentLayout {
        let parts: Vec<(LatentPart, usize)> = match self.variant {
            Variant::Dae => vec![
                (LatentPart::Texture, self.z_texture),
                (LatentPart::Affine, self.z_affine),
                (LatentPart::Warp, self.z_warp),
            ],
            Variant::ClassAware => vec![
                (LatentPart::Texture, self.z_texture),
                (LatentPart::Class, self.z_class),
                (LatentPart::Affine, self.z_affine),
                (LatentPart::Warp, self.z_warp),
            ],
            Variant::Intrinsic => vec![
                (LatentPart::Shading, self.z_shading),
                (LatentPart::Albedo, self.z_albedo),
                (LatentPart::Affine, self.z_affine),
                (LatentPart::Warp, self.z_warp),
            ],
        };
        LatentLayout::new(parts)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentPart {
    Texture,
    Class,
    Shading,
    Albedo,
    Affine,
    Warp,
}

impl_from_str!(LatentPart {
    "texture" => LatentPart::Texture,
    "class" => LatentPart::Class,
    "shading" => LatentPart::Shading,
    "albedo" => LatentPart::Albedo,
    "affine" => LatentPart::Affine,
    "warp" => LatentPart::Warp,
});

impl fmt::Display for LatentPart {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            LatentPart::Texture => "texture",
            LatentPart::Class => "class",
            LatentPart::Shading => "shading",
            LatentPart::Albedo => "albedo",
            LatentPart::Affine => "affine",
            LatentPart::Warp => "warp",
        };
        f.write_str(s)
    }
}

/// Ordered partition of the latent vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LatentLayout {
    parts: Vec<(LatentPart, Range<usize>)>,
}

impl LatentLayout {
    fn new(sizes: Vec<(LatentPart, usize)>) -> Self {
        let mut start = 0;
        let parts = sizes
            .into_iter()
            .map(|(p, n)| {
                let r = start..start + n;
                start += n;
                (p, r)
            })
            .collect();
        Self { parts }
    }

    pub fn total(&self) -> usize {
        self.parts.last().map_or(0, |(_, r)| r.end)
    }

    pub fn range(&self, part: LatentPart) -> Option<Range<usize>> {
        self.parts
            .iter()
            .find(|(p, _)| *p == part)
            .map(|(_, r)| r.clone())
    }

    pub fn parts(&self) -> impl Iterator<Item = (LatentPart, Range<usize>)> + '_ {
        self.parts.iter().cloned()
    }
}

/// Encoder output: `(N, Nz)` values in `(0, 1)` plus the partition they follow.
#[derive(Debug, Clone)]
pub struct LatentCode {
    pub values: Tensor,
    pub layout: LatentLayout,
}

impl LatentCode {
    pub fn new(values: Tensor, layout: LatentLayout) -> Result<Self> {
        let (_, nz) = values.dims2()?;
        if nz != layout.total() {
            return Err(DaeError::invalid(format!(
                "latent width {nz} does not match layout width {}",
                layout.total()
            )));
        }
        Ok(Self { values, layout })
    }

    pub fn batch_size(&self) -> usize {
        self.values.dims()[0]
    }

    /// The `(N, dim)` slice for `part`; zero-width parts yield `(N, 0)`.
    pub fn part(&self, part: LatentPart) -> Result<Tensor> {
        let r = self
            .layout
            .range(part)
            .ok_or_else(|| DaeError::config(format!("latent has no `{part}` partition")))?;
        Ok(self.values.narrow(1, r.start, r.len())?)
    }

    pub fn has(&self, part: LatentPart) -> bool {
        self.layout.range(part).is_some()
    }

    /// Copy with `part` replaced by `values`.
    pub fn with_part(&self, part: LatentPart, values: &Tensor) -> Result<Self> {
        let r = self
            .layout
            .range(part)
            .ok_or_else(|| DaeError::config(format!("latent has no `{part}` partition")))?;
        let total = self.layout.total();
        let mut pieces = Vec::new();
        if r.start > 0 {
            pieces.push(self.values.narrow(1, 0, r.start)?);
        }
        if !r.is_empty() {
            pieces.push(values.clone());
        }
        if r.end < total {
            pieces.push(self.values.narrow(1, r.end, total - r.end)?);
        }
        Self::new(Tensor::cat(&pieces, 1)?, self.layout.clone())
    }

    pub fn detach(&self) -> Self {
        Self {
            values: self.values.detach(),
            layout: self.layout.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_arithmetic() {
        let cfg = ModelConfig {
            z_texture: 32,
            z_affine: 32,
            z_warp: 32,
            ..ModelConfig::default()
        };
        let l = cfg.layout();
        assert_eq!(l.total(), 96);
        assert_eq!(l.range(LatentPart::Texture), Some(0..32));
        assert_eq!(l.range(LatentPart::Affine), Some(32..64));
        assert_eq!(l.range(LatentPart::Warp), Some(64..96));
    }

    #[test]
    fn class_code_sits_after_texture() {
        let cfg = ModelConfig {
            z_texture: 4,
            ..ModelConfig::class_aware(10, 8)
        };
        let l = cfg.layout();
        assert_eq!(l.range(LatentPart::Class), Some(4..12));
        assert_eq!(l.range(LatentPart::Affine), Some(12..44));
    }

    #[test]
    fn rejects_other_resolutions_and_missing_classes() {
        let cfg = ModelConfig {
            image_side: 32,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = ModelConfig {
            variant: Variant::ClassAware,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
        assert!(ModelConfig::intrinsic(3).validate().is_ok());
    }

    #[test]
    fn zero_texture_dim_is_allowed() {
        let cfg = ModelConfig {
            z_texture: 0,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_ok());
        assert_eq!(cfg.layout().range(LatentPart::Texture), Some(0..0));
    }
}
