//! Encoders, decoders and the assembled deforming autoencoder variants.

mod config;
mod conv;
mod dense;
mod discriminator;
pub mod layers;
mod model;
mod params;
pub mod unfold;

use candle_core::{DType, Tensor};
use rand_chacha::ChaCha8Rng;

pub use config::{
    Backbone, Deformation, LatentCode, LatentLayout, LatentPart, ModelConfig, Variant, IMAGE_SIDE,
};
pub use conv::{ConvDecoder, ConvEncoder};
pub use dense::{DenseDecoder, DenseEncoder};
pub use discriminator::{PatchDiscriminator, PATCH_LOGITS_SHAPE};
pub use model::{DeformingAutoencoder, ForwardOutput};
pub use params::ParamStore;

use crate::error::Result;

/// Records `(label, dims)` of intermediate activations when enabled.
#[derive(Debug, Default)]
pub struct ShapeTrace {
    enabled: bool,
    pub entries: Vec<(String, Vec<usize>)>,
}

impl ShapeTrace {
    pub fn off() -> Self {
        Self::default()
    }

    pub fn on() -> Self {
        Self {
            enabled: true,
            entries: Vec::new(),
        }
    }

    pub(crate) fn record(&mut self, label: impl Into<String>, t: &Tensor) {
        if self.enabled {
            self.entries.push((label.into(), t.dims().to_vec()));
        }
    }

    /// Recorded shapes as `(H, W, C)` triples, skipping the batch axis.
    pub fn hwc(&self) -> Vec<(usize, usize, usize)> {
        self.entries
            .iter()
            .map(|(_, d)| (d[2], d[3], d[1]))
            .collect()
    }
}

/// Output nonlinearity and final-layer initialisation of a decoder.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DecoderHead {
    /// Image in `[0, 1]` via a hard threshold; `bias` seeds the initial grey level.
    Image { bias: f64 },
    /// Raw increments, left to `clamp_increments`; starts near `identity`.
    Increments { identity: f64 },
    /// Raw offsets added to the identity grid; starts at zero.
    Residual,
}

/// Weight scale of warp heads, small so an untrained model starts near the identity warp.
const WARP_HEAD_STD: f64 = 1e-4;

impl DecoderHead {
    fn output_init(self) -> (f64, f64) {
        match self {
            DecoderHead::Image { bias } => (layers::WEIGHT_STD, bias),
            DecoderHead::Increments { identity } => (WARP_HEAD_STD, identity),
            DecoderHead::Residual => (WARP_HEAD_STD, 0.0),
        }
    }

    fn apply(self, x: &Tensor) -> Result<Tensor> {
        Ok(match self {
            DecoderHead::Image { .. } => x.clamp(0f32, 1f32)?,
            DecoderHead::Increments { .. } | DecoderHead::Residual => x.clone(),
        })
    }
}

/// An empty code becomes a constant input, so the decoder learns a single output.
fn decoder_input(z: &Tensor, in_dim: usize) -> Result<Tensor> {
    let (n, d) = z.dims2()?;
    if d != in_dim {
        return Err(crate::DaeError::invalid(format!(
            "decoder expects a {in_dim}-d code, got {d}"
        )));
    }
    if in_dim == 0 {
        Ok(Tensor::ones((n, 1), DType::F32, z.device())?)
    } else {
        Ok(z.clone())
    }
}

#[derive(Debug)]
pub enum Encoder {
    Conv(ConvEncoder),
    Dense(DenseEncoder),
}

impl Encoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cfg: &ModelConfig,
        nz: usize,
    ) -> Result<Self> {
        Ok(match cfg.backbone {
            Backbone::Conv => Encoder::Conv(ConvEncoder::new(
                store,
                rng,
                name,
                cfg.channels,
                nz,
                cfg.base_filters,
                cfg.leaky_slope,
            )?),
            Backbone::Dense => Encoder::Dense(DenseEncoder::new(
                store,
                rng,
                name,
                cfg.channels,
                nz,
                cfg.base_filters,
            )?),
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool, trace: &mut ShapeTrace) -> Result<Tensor> {
        match self {
            Encoder::Conv(e) => e.forward(x, train, trace),
            Encoder::Dense(e) => e.forward(x, train, trace),
        }
    }
}

#[derive(Debug)]
pub enum Decoder {
    Conv(ConvDecoder),
    Dense(DenseDecoder),
}

impl Decoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cfg: &ModelConfig,
        in_dim: usize,
        out_channels: usize,
        head: DecoderHead,
    ) -> Result<Self> {
        Ok(match cfg.backbone {
            Backbone::Conv => Decoder::Conv(ConvDecoder::new(
                store,
                rng,
                name,
                in_dim,
                out_channels,
                cfg.base_filters,
                head,
            )?),
            Backbone::Dense => Decoder::Dense(DenseDecoder::new(
                store,
                rng,
                name,
                in_dim,
                out_channels,
                cfg.base_filters,
                head,
            )?),
        })
    }

    pub fn forward(&self, z: &Tensor, train: bool, trace: &mut ShapeTrace) -> Result<Tensor> {
        match self {
            Decoder::Conv(d) => d.forward(z, train, trace),
            Decoder::Dense(d) => d.forward(z, train, trace),
        }
    }
}
