//! Patch-level real/fake discriminator.

use candle_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{leaky_relu, BatchNorm2d, Conv2d, ConvSpec};
use super::params::ParamStore;
use crate::error::{DaeError, Result};

/// Logit map `(1, 8, 8)` per 64x64 image: three stride-2 stages then a 3x3 scorer.
pub const PATCH_LOGITS_SHAPE: (usize, usize, usize) = (1, 8, 8);

#[derive(Debug)]
pub struct PatchDiscriminator {
    store: ParamStore,
    convs: Vec<Conv2d>,
    norms: Vec<BatchNorm2d>,
    score: Conv2d,
    slope: f64,
}

impl PatchDiscriminator {
    pub fn new(channels: usize, base: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let widths = [channels, base, 2 * base, 4 * base];
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        for k in 0..3 {
            let spec = if k == 0 {
                ConvSpec::new(4, 2, 1).with_bias()
            } else {
                ConvSpec::new(4, 2, 1)
            };
            convs.push(Conv2d::new(
                &mut store,
                &mut rng,
                &format!("disc.conv{k}"),
                widths[k],
                widths[k + 1],
                spec,
            )?);
            if k > 0 {
                norms.push(BatchNorm2d::new(
                    &mut store,
                    &mut rng,
                    &format!("disc.bn{k}"),
                    widths[k + 1],
                )?);
            }
        }
        let score = Conv2d::new(
            &mut store,
            &mut rng,
            "disc.score",
            4 * base,
            1,
            ConvSpec::new(3, 1, 1).with_bias(),
        )?;
        Ok(Self {
            store,
            convs,
            norms,
            score,
            slope: 0.2,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    /// `(N, C, 64, 64)` images to `(N, 1, 8, 8)` logits.
    pub fn forward(&self, image: &Tensor, train: bool) -> Result<Tensor> {
        let (_, _, h, w) = image.dims4()?;
        if h != 64 || w != 64 {
            return Err(DaeError::invalid(format!(
                "discriminator expects 64x64 input, got {h}x{w}"
            )));
        }
        let mut x = image.clone();
        for (k, conv) in self.convs.iter().enumerate() {
            x = conv.forward(&x)?;
            if k > 0 {
                x = self.norms[k - 1].forward(&x, train)?;
            }
            x = leaky_relu(&x, self.slope)?;
        }
        self.score.forward(&x)
    }
}
