//! Plain convolutional encoder and decoder.
//!
//! Encoder: `Conv(f)-LReLU-Conv(2f)-BN-LReLU-Conv(4f)-BN-LReLU-Conv(8f)-BN-LReLU-Conv(Nz)-Sigmoid`
//! with 4x4 stride-2 convolutions (64 -> 32 -> 16 -> 8 -> 4 -> 1).
//! Decoder: `ConvT(8f)-BN-ReLU-ConvT(4f)-BN-ReLU-ConvT(2f)-BN-ReLU-ConvT(f)-BN-ReLU-ConvT(f)-BN-ReLU-ConvT(Nc)`
//! growing 1 -> 4 -> 8 -> 16 -> 32 -> 64, with a final 3x3 layer at 64x64.

use candle_core::Tensor;
use candle_nn::ops::sigmoid;
use rand_chacha::ChaCha8Rng;

use super::layers::{leaky_relu, BatchNorm2d, Conv2d, ConvSpec, ConvTranspose2d};
use super::params::ParamStore;
use super::{DecoderHead, ShapeTrace};
use crate::error::Result;

const DOWN: ConvSpec = ConvSpec::new(4, 2, 1);
const UP: ConvSpec = ConvSpec::new(4, 2, 1);

#[derive(Debug)]
pub struct ConvEncoder {
    convs: Vec<Conv2d>,
    norms: Vec<BatchNorm2d>,
    head: Conv2d,
    slope: f64,
}

impl ConvEncoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        nz: usize,
        base: usize,
        slope: f64,
    ) -> Result<Self> {
        let widths = [channels, base, 2 * base, 4 * base, 8 * base];
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        for k in 0..4 {
            let spec = if k == 0 { DOWN.with_bias() } else { DOWN };
            convs.push(Conv2d::new(
                store,
                rng,
                &format!("{name}.conv{k}"),
                widths[k],
                widths[k + 1],
                spec,
            )?);
            if k > 0 {
                norms.push(BatchNorm2d::new(
                    store,
                    rng,
                    &format!("{name}.bn{k}"),
                    widths[k + 1],
                )?);
            }
        }
        let head = Conv2d::new(
            store,
            rng,
            &format!("{name}.head"),
            8 * base,
            nz,
            ConvSpec::new(4, 1, 0).with_bias(),
        )?;
        Ok(Self {
            convs,
            norms,
            head,
            slope,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool, trace: &mut ShapeTrace) -> Result<Tensor> {
        let mut h = x.clone();
        for (k, conv) in self.convs.iter().enumerate() {
            h = conv.forward(&h)?;
            if k > 0 {
                h = self.norms[k - 1].forward(&h, train)?;
            }
            h = leaky_relu(&h, self.slope)?;
            trace.record(format!("conv{k}"), &h);
        }
        let z = self.head.forward(&h)?;
        trace.record("head", &z);
        Ok(sigmoid(&z.flatten_from(1)?)?)
    }
}

#[derive(Debug)]
pub struct ConvDecoder {
    ups: Vec<ConvTranspose2d>,
    norms: Vec<BatchNorm2d>,
    out: ConvTranspose2d,
    head: DecoderHead,
    in_dim: usize,
}

impl ConvDecoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_channels: usize,
        base: usize,
        head: DecoderHead,
    ) -> Result<Self> {
        let widths = [in_dim.max(1), 8 * base, 4 * base, 2 * base, base, base];
        let mut ups = Vec::new();
        let mut norms = Vec::new();
        for k in 0..5 {
            let spec = if k == 0 { ConvSpec::new(4, 1, 0) } else { UP };
            ups.push(ConvTranspose2d::new(
                store,
                rng,
                &format!("{name}.up{k}"),
                widths[k],
                widths[k + 1],
                spec,
            )?);
            norms.push(BatchNorm2d::new(
                store,
                rng,
                &format!("{name}.bn{k}"),
                widths[k + 1],
            )?);
        }
        let (std, bias) = head.output_init();
        let out = ConvTranspose2d::with_init(
            store,
            rng,
            &format!("{name}.out"),
            base,
            out_channels,
            ConvSpec::new(3, 1, 1).with_bias(),
            std,
            bias,
        )?;
        Ok(Self {
            ups,
            norms,
            out,
            head,
            in_dim,
        })
    }

    pub fn forward(&self, z: &Tensor, train: bool, trace: &mut ShapeTrace) -> Result<Tensor> {
        let z = super::decoder_input(z, self.in_dim)?;
        let (n, d) = z.dims2()?;
        let mut h = z.reshape((n, d, 1, 1))?;
        for (k, up) in self.ups.iter().enumerate() {
            h = up.forward(&h)?;
            h = self.norms[k].forward(&h, train)?.relu()?;
            trace.record(format!("up{k}"), &h);
        }
        let out = self.out.forward(&h)?;
        trace.record("out", &out);
        self.head.apply(&out)
    }
}
