use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{DaeError, Result};

/// Named trainable parameters plus non-trainable buffers (running statistics).
///
/// Initialisation draws from a caller-supplied seeded generator so model
/// construction is reproducible.
#[derive(Debug, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn insert(map: &mut BTreeMap<String, Var>, name: &str, t: Tensor) -> Result<Tensor> {
        if map.contains_key(name) {
            return Err(DaeError::config(format!("duplicate parameter `{name}`")));
        }
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        map.insert(name.to_string(), var);
        Ok(out)
    }

    pub fn normal(
        &mut self,
        rng: &mut ChaCha8Rng,
        name: &str,
        shape: &[usize],
        mean: f64,
        std: f64,
    ) -> Result<Tensor> {
        let count: usize = shape.iter().product();
        let data: Vec<f32> = (0..count)
            .map(|_| (mean + std * rng.sample::<f64, _>(StandardNormal)) as f32)
            .collect();
        let t = Tensor::from_vec(data, shape, &Device::Cpu)?;
        Self::insert(&mut self.params, name, t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let t = Tensor::full(value as f32, shape, &Device::Cpu)?;
        Self::insert(&mut self.params, name, t)
    }

    pub fn from_values(&mut self, name: &str, shape: &[usize], values: Vec<f32>) -> Result<Tensor> {
        let t = Tensor::from_vec(values, shape, &Device::Cpu)?;
        Self::insert(&mut self.params, name, t)
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Var> {
        let t = Tensor::full(value as f32, shape, &Device::Cpu)?;
        Self::insert(&mut self.buffers, name, t)?;
        Ok(self.buffers[name].clone())
    }

    /// Trainable variables in name order.
    pub fn vars(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn param(&self, name: &str) -> Option<&Var> {
        self.params.get(name)
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(|v| v.elem_count()).sum()
    }

    /// Overwrites a parameter or buffer in place, keeping its shape.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .params
            .get(name)
            .or_else(|| self.buffers.get(name))
            .ok_or_else(|| DaeError::invalid(format!("unknown parameter `{name}`")))?;
        if var.dims() != value.dims() {
            return Err(DaeError::invalid(format!(
                "shape mismatch for `{name}`: {:?} vs {:?}",
                var.dims(),
                value.dims()
            )));
        }
        var.set(&value.to_dtype(DType::F32)?)?;
        Ok(())
    }

    /// Snapshot of every parameter and buffer, keyed `param/<name>` and `buffer/<name>`.
    /// The tensors are copies, so later updates to the store do not reach them.
    pub fn export(&self) -> Result<BTreeMap<String, Tensor>> {
        let p = self.params.iter().map(|(k, v)| (format!("param/{k}"), v));
        let b = self.buffers.iter().map(|(k, v)| (format!("buffer/{k}"), v));
        p.chain(b)
            .map(|(k, v)| Ok((k, v.as_tensor().detach().copy()?)))
            .collect()
    }

    /// Restores values written by [`ParamStore::export`]; the key sets must match exactly.
    pub fn import(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        let expected = self.params.len() + self.buffers.len();
        let present = tensors
            .keys()
            .filter(|k| k.starts_with("param/") || k.starts_with("buffer/"))
            .count();
        if present != expected {
            return Err(DaeError::Checkpoint(format!(
                "expected {expected} parameter tensors, found {present}"
            )));
        }
        for (prefix, map) in [("param/", &self.params), ("buffer/", &self.buffers)] {
            for (name, var) in map {
                let t = tensors.get(&format!("{prefix}{name}")).ok_or_else(|| {
                    DaeError::Checkpoint(format!("missing tensor `{prefix}{name}`"))
                })?;
                if t.dims() != var.dims() {
                    return Err(DaeError::Checkpoint(format!(
                        "tensor `{name}` has shape {:?}, model expects {:?}",
                        t.dims(),
                        var.dims()
                    )));
                }
                var.set(t)?;
            }
        }
        Ok(())
    }
}
