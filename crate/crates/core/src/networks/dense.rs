//! Densely connected encoder and decoder.
//!
//! Inside a block every 3x3 layer sees the concatenation of the block input
//! and all earlier layer outputs, and emits `n` channels; the block returns
//! the last layer's output so spatial size and width are preserved. There are
//! no 1x1 bottlenecks inside blocks.

use candle_core::Tensor;
use candle_nn::ops::sigmoid;
use rand_chacha::ChaCha8Rng;

use super::layers::{BatchNorm2d, Conv2d, ConvSpec, ConvTranspose2d};
use super::params::ParamStore;
use super::{DecoderHead, ShapeTrace};
use crate::error::Result;

const SAME3: ConvSpec = ConvSpec::new(3, 1, 1);

#[derive(Debug, Clone, Copy)]
enum Act {
    Relu,
    Tanh,
}

impl Act {
    fn apply(self, x: &Tensor) -> Result<Tensor> {
        Ok(match self {
            Act::Relu => x.relu()?,
            Act::Tanh => x.tanh()?,
        })
    }
}

#[derive(Debug)]
enum Layer {
    Conv(Conv2d),
    ConvT(ConvTranspose2d),
}

impl Layer {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Conv(c) => c.forward(x),
            Layer::ConvT(c) => c.forward(x),
        }
    }
}

/// BN -> activation -> (transposed) convolution.
#[derive(Debug)]
struct Unit {
    norm: BatchNorm2d,
    act: Act,
    layer: Layer,
}

impl Unit {
    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let h = self.act.apply(&self.norm.forward(x, train)?)?;
        self.layer.forward(&h)
    }
}

#[derive(Debug)]
struct DenseBlock {
    units: Vec<Unit>,
}

impl DenseBlock {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        width: usize,
        depth: usize,
        act: Act,
        transposed: bool,
    ) -> Result<Self> {
        let mut units = Vec::with_capacity(depth);
        for k in 0..depth {
            let c_in = width * (k + 1);
            let lname = format!("{name}.{k}");
            let norm = BatchNorm2d::new(store, rng, &format!("{lname}.bn"), c_in)?;
            let layer = if transposed {
                Layer::ConvT(ConvTranspose2d::new(
                    store,
                    rng,
                    &format!("{lname}.conv"),
                    c_in,
                    width,
                    SAME3,
                )?)
            } else {
                Layer::Conv(Conv2d::new(
                    store,
                    rng,
                    &format!("{lname}.conv"),
                    c_in,
                    width,
                    SAME3,
                )?)
            };
            units.push(Unit { norm, act, layer });
        }
        Ok(Self { units })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let mut features = vec![x.clone()];
        let mut last = x.clone();
        for unit in &self.units {
            let input = if features.len() == 1 {
                features[0].clone()
            } else {
                Tensor::cat(&features, 1)?
            };
            last = unit.forward(&input, train)?;
            features.push(last.clone());
        }
        Ok(last)
    }
}

/// (width, depth) of the four dense blocks, with widths in units of `base`.
const BLOCKS: [(usize, usize); 4] = [(1, 6), (2, 12), (4, 24), (8, 16)];

#[derive(Debug)]
pub struct DenseEncoder {
    stem: Unit,
    blocks: Vec<DenseBlock>,
    transitions: Vec<Unit>,
    pools: Vec<usize>,
}

impl DenseEncoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        nz: usize,
        base: usize,
    ) -> Result<Self> {
        let stem = Unit {
            norm: BatchNorm2d::new(store, rng, &format!("{name}.stem.bn"), channels)?,
            act: Act::Relu,
            layer: Layer::Conv(Conv2d::new(
                store,
                rng,
                &format!("{name}.stem.conv"),
                channels,
                base,
                ConvSpec::new(4, 2, 1),
            )?),
        };
        let mut blocks = Vec::new();
        let mut transitions = Vec::new();
        let mut pools = Vec::new();
        for (k, &(mult, depth)) in BLOCKS.iter().enumerate() {
            let width = mult * base;
            blocks.push(DenseBlock::new(
                store,
                rng,
                &format!("{name}.dbe{k}"),
                width,
                depth,
                Act::Relu,
                false,
            )?);
            let (out, pool) = if k + 1 < BLOCKS.len() {
                (2 * width, 2)
            } else {
                (nz, 4)
            };
            let tname = format!("{name}.tbe{k}");
            let spec = if k + 1 < BLOCKS.len() {
                ConvSpec::new(1, 1, 0)
            } else {
                ConvSpec::new(1, 1, 0).with_bias()
            };
            transitions.push(Unit {
                norm: BatchNorm2d::new(store, rng, &format!("{tname}.bn"), width)?,
                act: Act::Relu,
                layer: Layer::Conv(Conv2d::new(
                    store,
                    rng,
                    &format!("{tname}.conv"),
                    width,
                    out,
                    spec,
                )?),
            });
            pools.push(pool);
        }
        Ok(Self {
            stem,
            blocks,
            transitions,
            pools,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool, trace: &mut ShapeTrace) -> Result<Tensor> {
        let mut h = self.stem.forward(x, train)?;
        trace.record("stem", &h);
        for k in 0..self.blocks.len() {
            h = self.blocks[k].forward(&h, train)?;
            trace.record(format!("dbe{k}"), &h);
            h = self.transitions[k]
                .forward(&h, train)?
                .max_pool2d(self.pools[k])?;
            trace.record(format!("tbe{k}"), &h);
        }
        Ok(sigmoid(&h.flatten_from(1)?)?)
    }
}

#[derive(Debug)]
pub struct DenseDecoder {
    input_norm: BatchNorm2d,
    stem: ConvTranspose2d,
    blocks: Vec<DenseBlock>,
    transitions: Vec<Unit>,
    out: Unit,
    head: DecoderHead,
    in_dim: usize,
}

impl DenseDecoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_channels: usize,
        base: usize,
        head: DecoderHead,
    ) -> Result<Self> {
        let d = in_dim.max(1);
        let input_norm = BatchNorm2d::new(store, rng, &format!("{name}.in.bn"), d)?;
        let stem = ConvTranspose2d::new(
            store,
            rng,
            &format!("{name}.stem"),
            d,
            8 * base,
            ConvSpec::new(4, 1, 0),
        )?;
        let mut blocks = Vec::new();
        let mut transitions = Vec::new();
        for (k, &(mult, depth)) in BLOCKS.iter().rev().enumerate() {
            let width = mult * base;
            let out = if mult == 1 { base } else { width / 2 };
            blocks.push(DenseBlock::new(
                store,
                rng,
                &format!("{name}.dbd{k}"),
                width,
                depth,
                Act::Tanh,
                true,
            )?);
            let tname = format!("{name}.tbd{k}");
            transitions.push(Unit {
                norm: BatchNorm2d::new(store, rng, &format!("{tname}.bn"), width)?,
                act: Act::Tanh,
                layer: Layer::ConvT(ConvTranspose2d::new(
                    store,
                    rng,
                    &format!("{tname}.conv"),
                    width,
                    out,
                    ConvSpec::new(4, 2, 1),
                )?),
            });
        }
        let (std, bias) = head.output_init();
        let out = Unit {
            norm: BatchNorm2d::new(store, rng, &format!("{name}.out.bn"), base)?,
            act: Act::Tanh,
            layer: Layer::ConvT(ConvTranspose2d::with_init(
                store,
                rng,
                &format!("{name}.out.conv"),
                base,
                out_channels,
                SAME3.with_bias(),
                std,
                bias,
            )?),
        };
        Ok(Self {
            input_norm,
            stem,
            blocks,
            transitions,
            out,
            head,
            in_dim,
        })
    }

    pub fn forward(&self, z: &Tensor, train: bool, trace: &mut ShapeTrace) -> Result<Tensor> {
        let z = super::decoder_input(z, self.in_dim)?;
        let (n, d) = z.dims2()?;
        let h = self
            .input_norm
            .forward(&z.reshape((n, d, 1, 1))?, train)?
            .tanh()?;
        let mut h = self.stem.forward(&h)?;
        trace.record("stem", &h);
        for k in 0..self.blocks.len() {
            h = self.blocks[k].forward(&h, train)?;
            trace.record(format!("dbd{k}"), &h);
            h = self.transitions[k].forward(&h, train)?;
            trace.record(format!("tbd{k}"), &h);
        }
        let out = self.out.forward(&h, train)?;
        trace.record("out", &out);
        self.head.apply(&out)
    }
}
