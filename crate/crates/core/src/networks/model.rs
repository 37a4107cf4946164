use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::Linear;
use super::{
    Decoder, DecoderHead, Encoder, LatentCode, LatentPart, ModelConfig, ParamStore, ShapeTrace,
    Variant,
};
use crate::error::{DaeError, Result};
use crate::warp::{
    self, bilinear_sample, clamp_increments, compose, identity_increment, integrate,
    residual_field, AffineParams, DifferentialWarp, WarpField,
};

#[derive(Debug)]
enum Appearance {
    Texture(Decoder),
    Intrinsic { shading: Decoder, albedo: Decoder },
}

/// Everything produced by one pass through the model.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub reconstruction: Tensor,
    /// Appearance in template coordinates, `(N, C, H, W)`.
    pub texture: Tensor,
    pub shading: Option<Tensor>,
    pub albedo: Option<Tensor>,
    /// Clamped increments, when the integral branch is active.
    pub increments: Option<DifferentialWarp>,
    /// Raw offsets, when the residual-grid ablation is active.
    pub residual: Option<Tensor>,
    /// Local (non-rigid) field before the affine transform.
    pub local_field: WarpField,
    /// Final sampling field, affine composed with local.
    pub field: WarpField,
    pub affine: AffineParams,
    pub latent: LatentCode,
    pub class_logits: Option<Tensor>,
}

/// Encoder, appearance decoder(s), warp decoder and affine head sharing one latent code.
#[derive(Debug)]
pub struct DeformingAutoencoder {
    cfg: ModelConfig,
    store: ParamStore,
    encoder: Encoder,
    appearance: Appearance,
    warp_decoder: Option<Decoder>,
    affine_head: Option<Linear>,
    classifier: Option<Linear>,
}

impl DeformingAutoencoder {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let layout = cfg.layout();
        let z_class = cfg.z_class;
        let encoder = Encoder::new(&mut store, &mut rng, "encoder", &cfg, layout.total())?;
        let appearance = match cfg.variant {
            Variant::Dae | Variant::ClassAware => Appearance::Texture(Decoder::new(
                &mut store,
                &mut rng,
                "texture",
                &cfg,
                cfg.z_texture + z_class,
                cfg.channels,
                DecoderHead::Image { bias: 0.5 },
            )?),
            Variant::Intrinsic => Appearance::Intrinsic {
                shading: Decoder::new(
                    &mut store,
                    &mut rng,
                    "shading",
                    &cfg,
                    cfg.z_shading,
                    cfg.shading_channels,
                    DecoderHead::Image { bias: 0.9 },
                )?,
                albedo: Decoder::new(
                    &mut store,
                    &mut rng,
                    "albedo",
                    &cfg,
                    cfg.z_albedo,
                    cfg.channels,
                    DecoderHead::Image { bias: 0.5 },
                )?,
            },
        };
        let warp_decoder = if cfg.deformation.uses_local() {
            let head = if cfg.residual_grid {
                DecoderHead::Residual
            } else {
                DecoderHead::Increments {
                    identity: identity_increment(cfg.image_side),
                }
            };
            Some(Decoder::new(
                &mut store,
                &mut rng,
                "warp",
                &cfg,
                cfg.z_warp + z_class,
                2,
                head,
            )?)
        } else {
            None
        };
        let affine_head = if cfg.deformation.uses_affine() {
            Some(Linear::constant_output(
                &mut store,
                "affine",
                cfg.z_affine + z_class,
                &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
            )?)
        } else {
            None
        };
        let classifier = if cfg.variant == Variant::ClassAware {
            Some(Linear::new(
                &mut store,
                &mut rng,
                "classifier",
                z_class,
                cfg.num_classes,
            )?)
        } else {
            None
        };
        Ok(Self {
            cfg,
            store,
            encoder,
            appearance,
            warp_decoder,
            affine_head,
            classifier,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    fn check_image(&self, image: &Tensor) -> Result<()> {
        let (_, c, h, w) = image.dims4()?;
        let s = self.cfg.image_side;
        if c != self.cfg.channels || h != s || w != s {
            return Err(DaeError::invalid(format!(
                "expected (N, {}, {s}, {s}) images, got {:?}",
                self.cfg.channels,
                image.dims()
            )));
        }
        if image.dtype() != DType::F32 {
            return Err(DaeError::invalid("model input must be f32"));
        }
        Ok(())
    }

    pub fn encode(&self, image: &Tensor, train: bool) -> Result<LatentCode> {
        self.encode_traced(image, train, &mut ShapeTrace::off())
    }

    pub fn encode_traced(
        &self,
        image: &Tensor,
        train: bool,
        trace: &mut ShapeTrace,
    ) -> Result<LatentCode> {
        self.check_image(image)?;
        let z = self.encoder.forward(image, train, trace)?;
        LatentCode::new(z, self.cfg.layout())
    }

    /// Concatenates `part` with the class code when the variant has one.
    fn decoder_code(&self, latent: &LatentCode, part: LatentPart) -> Result<Tensor> {
        let z = latent.part(part)?;
        if self.cfg.variant == Variant::ClassAware {
            let c = latent.part(LatentPart::Class)?;
            Ok(Tensor::cat(&[&z, &c], 1)?)
        } else {
            Ok(z)
        }
    }

    /// Class logits from a `(N, z_class)` code.
    pub fn class_head(&self, z_class: &Tensor) -> Result<Tensor> {
        let head = self
            .classifier
            .as_ref()
            .ok_or_else(|| DaeError::config("class head requires the class_aware variant"))?;
        head.forward(z_class)
    }

    /// Decodes appearance only: `(texture, shading, albedo)`.
    pub fn decode_appearance(
        &self,
        latent: &LatentCode,
        train: bool,
        trace: &mut ShapeTrace,
    ) -> Result<(Tensor, Option<Tensor>, Option<Tensor>)> {
        match &self.appearance {
            Appearance::Texture(dec) => {
                let t = dec.forward(
                    &self.decoder_code(latent, LatentPart::Texture)?,
                    train,
                    trace,
                )?;
                Ok((t, None, None))
            }
            Appearance::Intrinsic { shading, albedo } => {
                let s = shading.forward(&latent.part(LatentPart::Shading)?, train, trace)?;
                let a = albedo.forward(
                    &latent.part(LatentPart::Albedo)?,
                    train,
                    &mut ShapeTrace::off(),
                )?;
                let t = s.broadcast_mul(&a)?;
                Ok((t, Some(s), Some(a)))
            }
        }
    }

    /// Decodes every output for an existing latent code.
    pub fn decode(&self, latent: &LatentCode, train: bool) -> Result<ForwardOutput> {
        let n = latent.batch_size();
        let side = self.cfg.image_side;
        let dev = latent.values.device().clone();
        let (texture, shading, albedo) =
            self.decode_appearance(latent, train, &mut ShapeTrace::off())?;

        let mut increments = None;
        let mut residual = None;
        let local_field = match &self.warp_decoder {
            Some(dec) => {
                let raw = dec.forward(
                    &self.decoder_code(latent, LatentPart::Warp)?,
                    train,
                    &mut ShapeTrace::off(),
                )?;
                if self.cfg.residual_grid {
                    let f = residual_field(&raw)?;
                    residual = Some(raw);
                    f
                } else {
                    let d = clamp_increments(&raw)?;
                    let f = integrate(&d)?;
                    increments = Some(d);
                    f
                }
            }
            None => WarpField::identity(n, side, side, DType::F32, &dev)?,
        };
        let affine = match &self.affine_head {
            Some(head) => AffineParams::from_flat(
                &head.forward(&self.decoder_code(latent, LatentPart::Affine)?)?,
            )?,
            None => AffineParams::identity(n, DType::F32, &dev)?,
        };
        let field = compose(&affine, &local_field)?;
        let reconstruction = bilinear_sample(&texture, &field)?;
        let class_logits = match &self.classifier {
            Some(_) => Some(self.class_head(&latent.part(LatentPart::Class)?)?),
            None => None,
        };
        Ok(ForwardOutput {
            reconstruction,
            texture,
            shading,
            albedo,
            increments,
            residual,
            local_field,
            field,
            affine,
            latent: latent.clone(),
            class_logits,
        })
    }

    pub fn forward(&self, image: &Tensor, train: bool) -> Result<ForwardOutput> {
        let latent = self.encode(image, train)?;
        self.decode(&latent, train)
    }

    /// Forward pass for the texture-based variants.
    pub fn dae_forward(&self, image: &Tensor, train: bool) -> Result<ForwardOutput> {
        if self.cfg.variant == Variant::Intrinsic {
            return Err(DaeError::config(
                "dae_forward needs the dae or class_aware variant",
            ));
        }
        self.forward(image, train)
    }

    /// Forward pass for the shading/albedo variant.
    pub fn intrinsic_forward(&self, image: &Tensor, train: bool) -> Result<ForwardOutput> {
        if self.cfg.variant != Variant::Intrinsic {
            return Err(DaeError::config(
                "intrinsic_forward needs the intrinsic variant",
            ));
        }
        self.forward(image, train)
    }

    /// Warps any template-frame image with the model's field for `latent`.
    pub fn warp_to_image(&self, template: &Tensor, field: &WarpField) -> Result<Tensor> {
        warp::bilinear_sample(template, field)
    }

    pub fn device(&self) -> Device {
        Device::Cpu
    }
}
