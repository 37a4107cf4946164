use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;

use crate::error::{DaeError, Result};
use crate::networks::ParamStore;

/// Adam with bias correction. Moments are keyed by parameter name so they
/// can be written to and restored from a checkpoint.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Updates every parameter of `store` that received a gradient.
    pub fn step(&mut self, store: &ParamStore, grads: &GradStore) -> Result<()> {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, var) in store.vars() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            // gradients can still reference the forward graph
            let g = &g.detach();
            let m = match self.m.get(name) {
                Some(m) => ((m * self.beta1)? + (g * (1.0 - self.beta1))?)?,
                None => (g * (1.0 - self.beta1))?,
            };
            let v = match self.v.get(name) {
                Some(v) => ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?,
                None => (g.sqr()? * (1.0 - self.beta2))?,
            };
            if self.lr != 0.0 {
                let update = ((&m / c1)? / ((&v / c2)?.sqrt()? + self.eps)?)?;
                var.set(&(var.as_tensor().detach() - (update * self.lr)?)?)?;
            }
            self.m.insert(name.to_string(), m);
            self.v.insert(name.to_string(), v);
        }
        Ok(())
    }

    /// Moments keyed `<prefix>m/<name>` and `<prefix>v/<name>`.
    pub fn export(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        let m = self
            .m
            .iter()
            .map(|(k, t)| (format!("{prefix}m/{k}"), t.clone()));
        let v = self
            .v
            .iter()
            .map(|(k, t)| (format!("{prefix}v/{k}"), t.clone()));
        m.chain(v).collect()
    }

    pub fn import(
        &mut self,
        prefix: &str,
        tensors: &BTreeMap<String, Tensor>,
        t: u64,
    ) -> Result<()> {
        self.m.clear();
        self.v.clear();
        for (key, tensor) in tensors {
            let Some(rest) = key.strip_prefix(prefix) else {
                continue;
            };
            if let Some(name) = rest.strip_prefix("m/") {
                self.m.insert(name.to_string(), tensor.clone());
            } else if let Some(name) = rest.strip_prefix("v/") {
                self.v.insert(name.to_string(), tensor.clone());
            } else {
                return Err(DaeError::Checkpoint(format!(
                    "unexpected optimizer tensor `{key}`"
                )));
            }
        }
        if self.m.len() != self.v.len() {
            return Err(DaeError::Checkpoint(
                "optimizer moments are incomplete".into(),
            ));
        }
        self.t = t;
        Ok(())
    }
}
