//! Thin layer wrappers whose weights live in a [`ParamStore`].

use candle_core::{CpuStorage, CustomOp3, Layout, Module, Shape, Tensor, Var, D};
use rand_chacha::ChaCha8Rng;

use super::params::ParamStore;
use super::unfold::{conv2d, conv_transpose2d};
use crate::error::Result;

/// Standard deviation for convolution weights.
pub const WEIGHT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub bias: bool,
}

impl ConvSpec {
    pub const fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kernel,
            stride,
            padding,
            bias: false,
        }
    }

    pub const fn with_bias(self) -> Self {
        Self { bias: true, ..self }
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    spec: ConvSpec,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        spec: ConvSpec,
    ) -> Result<Self> {
        let k = spec.kernel;
        let w = store.normal(
            rng,
            &format!("{name}.weight"),
            &[c_out, c_in, k, k],
            0.0,
            WEIGHT_STD,
        )?;
        let b = if spec.bias {
            Some(store.constant(&format!("{name}.bias"), &[c_out], 0.0)?)
        } else {
            None
        };
        Ok(Self {
            weight: w,
            bias: b,
            spec,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv2d(
            x,
            &self.weight,
            self.bias.as_ref(),
            self.spec.stride,
            self.spec.padding,
        )
    }
}

#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    weight: Tensor,
    bias: Option<Tensor>,
    spec: ConvSpec,
}

impl ConvTranspose2d {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        spec: ConvSpec,
    ) -> Result<Self> {
        Self::with_init(store, rng, name, c_in, c_out, spec, WEIGHT_STD, 0.0)
    }

    /// Like [`ConvTranspose2d::new`] with explicit weight scale and bias value.
    #[allow(clippy::too_many_arguments)]
    pub fn with_init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        spec: ConvSpec,
        weight_std: f64,
        bias: f64,
    ) -> Result<Self> {
        let k = spec.kernel;
        let w = store.normal(
            rng,
            &format!("{name}.weight"),
            &[c_in, c_out, k, k],
            0.0,
            weight_std,
        )?;
        let b = if spec.bias {
            Some(store.constant(&format!("{name}.bias"), &[c_out], bias)?)
        } else {
            None
        };
        Ok(Self {
            weight: w,
            bias: b,
            spec,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv_transpose2d(
            x,
            &self.weight,
            self.bias.as_ref(),
            self.spec.stride,
            self.spec.padding,
        )
    }
}

#[derive(Debug, Clone)]
pub struct Linear(candle_nn::Linear);

impl Linear {
    /// Gaussian weights scaled by `1/sqrt(fan_in)`, zero bias.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
    ) -> Result<Self> {
        let std = 1.0 / (c_in.max(1) as f64).sqrt();
        let w = store.normal(rng, &format!("{name}.weight"), &[c_out, c_in], 0.0, std)?;
        let b = store.constant(&format!("{name}.bias"), &[c_out], 0.0)?;
        Ok(Self(candle_nn::Linear::new(w, Some(b))))
    }

    /// Zero weights with a fixed bias, so the layer starts as a constant map.
    pub fn constant_output(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        bias: &[f32],
    ) -> Result<Self> {
        let w = store.constant(&format!("{name}.weight"), &[bias.len(), c_in], 0.0)?;
        let b = store.from_values(&format!("{name}.bias"), &[bias.len()], bias.to_vec())?;
        Ok(Self(candle_nn::Linear::new(w, Some(b))))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.0.forward(x)?)
    }
}

/// Batch normalisation over `(N, C, H, W)` with running statistics kept as buffers.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    weight: Tensor,
    bias: Tensor,
    running_mean: Var,
    running_var: Var,
    momentum: f64,
    eps: f64,
}

impl BatchNorm2d {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
    ) -> Result<Self> {
        Ok(Self {
            weight: store.normal(rng, &format!("{name}.weight"), &[channels], 1.0, WEIGHT_STD)?,
            bias: store.constant(&format!("{name}.bias"), &[channels], 0.0)?,
            running_mean: store.buffer(&format!("{name}.running_mean"), &[channels], 0.0)?,
            running_var: store.buffer(&format!("{name}.running_var"), &[channels], 1.0)?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let shape = (1, c, 1, 1);
        if train {
            let xd = x.detach();
            let mean = xd.mean_keepdim(0)?.mean_keepdim(2)?.mean_keepdim(3)?;
            let var = xd
                .broadcast_sub(&mean)?
                .sqr()?
                .mean_keepdim(0)?
                .mean_keepdim(2)?
                .mean_keepdim(3)?;
            let count = (n * h * w) as f64;
            let unbiased = if count > 1.0 {
                count / (count - 1.0)
            } else {
                1.0
            };
            let m = self.momentum;
            let rm = ((self.running_mean.as_tensor().detach() * (1.0 - m))?
                + (mean.flatten_all()? * m)?)?;
            let rv = ((self.running_var.as_tensor().detach() * (1.0 - m))?
                + (var.flatten_all()? * (m * unbiased))?)?;
            self.running_mean.set(&rm)?;
            self.running_var.set(&rv)?;
            let op = BatchNormTrain { eps: self.eps };
            return Ok(x.contiguous()?.apply_op3(&self.weight, &self.bias, op)?);
        }
        let mean = self.running_mean.as_tensor().reshape(shape)?;
        let var = self.running_var.as_tensor().reshape(shape)?;
        let xhat = x
            .broadcast_sub(&mean)?
            .broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(xhat
            .broadcast_mul(&self.weight.reshape(shape)?)?
            .broadcast_add(&self.bias.reshape(shape)?)?)
    }
}

/// Batch-statistics normalisation `gamma * (x - mu) / sigma + beta` fused
/// into one op with a closed-form backward.
struct BatchNormTrain {
    eps: f64,
}

struct ChannelStats {
    n: usize,
    c: usize,
    hw: usize,
    mean: Vec<f64>,
    inv: Vec<f64>,
}

impl ChannelStats {
    fn of(x: &[f64], dims: &[usize], eps: f64) -> Self {
        let (n, c, hw) = (dims[0], dims[1], dims[2] * dims[3]);
        let m = (n * hw) as f64;
        let mut mean = vec![0.0; c];
        let mut inv = vec![0.0; c];
        for ch in 0..c {
            let mut s = 0.0;
            for b in 0..n {
                s += x[(b * c + ch) * hw..(b * c + ch + 1) * hw]
                    .iter()
                    .sum::<f64>();
            }
            let mu = s / m;
            let mut v = 0.0;
            for b in 0..n {
                v += x[(b * c + ch) * hw..(b * c + ch + 1) * hw]
                    .iter()
                    .map(|x| (x - mu).powi(2))
                    .sum::<f64>();
            }
            mean[ch] = mu;
            inv[ch] = 1.0 / (v / m + eps).sqrt();
        }
        Self {
            n,
            c,
            hw,
            mean,
            inv,
        }
    }

    fn plane(&self, b: usize, ch: usize) -> std::ops::Range<usize> {
        (b * self.c + ch) * self.hw..(b * self.c + ch + 1) * self.hw
    }
}

fn as_f64(s: &CpuStorage, l: &Layout) -> candle_core::Result<Vec<f64>> {
    let (a, b) = l
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::Msg("batch norm expects contiguous inputs".into()))?;
    Ok(match s {
        CpuStorage::F32(v) => v[a..b].iter().map(|&x| x as f64).collect(),
        CpuStorage::F64(v) => v[a..b].to_vec(),
        _ => candle_core::bail!("batch norm supports f32 and f64 only"),
    })
}

fn like(s: &CpuStorage, v: Vec<f64>) -> CpuStorage {
    match s {
        CpuStorage::F32(_) => CpuStorage::F32(v.into_iter().map(|x| x as f32).collect()),
        _ => CpuStorage::F64(v),
    }
}

fn tensor_f64(t: &Tensor) -> candle_core::Result<Vec<f64>> {
    t.flatten_all()?
        .to_dtype(candle_core::DType::F64)?
        .to_vec1::<f64>()
}

impl CustomOp3 for BatchNormTrain {
    fn name(&self) -> &'static str {
        "batch-norm-train"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = l1.shape().dims().to_vec();
        let x = as_f64(s1, l1)?;
        let (gamma, beta) = (as_f64(s2, l2)?, as_f64(s3, l3)?);
        let st = ChannelStats::of(&x, &dims, self.eps);
        let mut y = vec![0.0; x.len()];
        for b in 0..st.n {
            for ch in 0..st.c {
                let (mu, inv, g, bt) = (st.mean[ch], st.inv[ch], gamma[ch], beta[ch]);
                for i in st.plane(b, ch) {
                    y[i] = (x[i] - mu) * inv * g + bt;
                }
            }
        }
        Ok((like(s1, y), Shape::from(dims)))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        _beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let dims = x.dims().to_vec();
        let (xv, gv, gam) = (tensor_f64(x)?, tensor_f64(grad)?, tensor_f64(gamma)?);
        let st = ChannelStats::of(&xv, &dims, self.eps);
        let m = (st.n * st.hw) as f64;
        let (mut dgamma, mut dbeta) = (vec![0.0; st.c], vec![0.0; st.c]);
        for b in 0..st.n {
            for ch in 0..st.c {
                for i in st.plane(b, ch) {
                    dbeta[ch] += gv[i];
                    dgamma[ch] += gv[i] * (xv[i] - st.mean[ch]) * st.inv[ch];
                }
            }
        }
        let mut dx = vec![0.0; xv.len()];
        for b in 0..st.n {
            for ch in 0..st.c {
                let k = gam[ch] * st.inv[ch] / m;
                for i in st.plane(b, ch) {
                    let xhat = (xv[i] - st.mean[ch]) * st.inv[ch];
                    dx[i] = k * (m * gv[i] - dbeta[ch] - xhat * dgamma[ch]);
                }
            }
        }
        let dev = x.device();
        let dt = x.dtype();
        let dx = Tensor::from_vec(dx, dims, dev)?.to_dtype(dt)?;
        let dgamma = Tensor::from_vec(dgamma, st.c, dev)?.to_dtype(dt)?;
        let dbeta = Tensor::from_vec(dbeta, st.c, dev)?.to_dtype(dt)?;
        Ok((Some(dx), Some(dgamma), Some(dbeta)))
    }
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    // max(x, slope * x) for 0 <= slope <= 1
    Ok(x.maximum(&(x * slope)?)?)
}

/// Flattens `(N, C, 1, 1)` maps to `(N, C)`.
pub fn flatten_spatial(x: &Tensor) -> Result<Tensor> {
    Ok(x.flatten_from(1)?)
}

/// Per-sample mean over every axis but the first.
pub fn per_sample_mean(x: &Tensor) -> Result<Tensor> {
    Ok(x.flatten_from(1)?.mean(D::Minus1)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};
    use rand::SeedableRng;

    #[test]
    fn fused_batch_norm_matches_the_composed_formula() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bn = BatchNorm2d::new(&mut store, &mut rng, "bn", 3).unwrap();
        let x = Var::from_tensor(&Tensor::randn(0.5f32, 2.0, (4, 3, 5, 5), &Device::Cpu).unwrap())
            .unwrap();
        let up = Tensor::randn(0f32, 1.0, (4, 3, 5, 5), &Device::Cpu).unwrap();
        let fused = bn.forward(&x, true).unwrap();

        let shape = (1, 3, 1, 1);
        let mean = x
            .mean_keepdim(0)
            .unwrap()
            .mean_keepdim(2)
            .unwrap()
            .mean_keepdim(3)
            .unwrap();
        let c = x.broadcast_sub(&mean).unwrap();
        let var = c
            .sqr()
            .unwrap()
            .mean_keepdim(0)
            .unwrap()
            .mean_keepdim(2)
            .unwrap()
            .mean_keepdim(3)
            .unwrap();
        let reference = c
            .broadcast_div(&(var + 1e-5).unwrap().sqrt().unwrap())
            .unwrap()
            .broadcast_mul(&bn.weight.reshape(shape).unwrap())
            .unwrap()
            .broadcast_add(&bn.bias.reshape(shape).unwrap())
            .unwrap();
        let diff = |a: &Tensor, b: &Tensor| {
            (a - b)
                .unwrap()
                .abs()
                .unwrap()
                .flatten_all()
                .unwrap()
                .max(0)
                .unwrap()
                .to_scalar::<f32>()
                .unwrap()
        };
        assert!(diff(&fused, &reference) < 1e-5);

        let ga = (fused * &up)
            .unwrap()
            .sum_all()
            .unwrap()
            .backward()
            .unwrap();
        let gb = (reference * &up)
            .unwrap()
            .sum_all()
            .unwrap()
            .backward()
            .unwrap();
        assert!(diff(ga.get(&x).unwrap(), gb.get(&x).unwrap()) < 1e-4);
        for p in [&bn.weight, &bn.bias] {
            assert!(diff(ga.get(p).unwrap(), gb.get(p).unwrap()) < 1e-4);
        }
        assert_eq!(x.dtype(), DType::F32);
    }
}
