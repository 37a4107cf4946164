//! Two-layer landmark regressor trained on frozen deformation fields.

use candle_core::{Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LandmarkSet;
use crate::error::{DaeError, Result};
use crate::networks::layers::Linear;
use crate::networks::ParamStore;
use crate::training::{epoch_order, Adam};
use crate::warp::WarpField;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegressorConfig {
    pub input_dim: usize,
    pub hidden: usize,
    pub output: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Fraction of the training pairs held out for early stopping.
    pub val_fraction: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for RegressorConfig {
    fn default() -> Self {
        Self {
            input_dim: 64 * 64 * 2,
            hidden: 100,
            output: 10,
            learning_rate: 1e-3,
            epochs: 200,
            batch_size: 64,
            val_fraction: 0.1,
            patience: 20,
            seed: 0,
        }
    }
}

impl RegressorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.output != 10 {
            return Err(DaeError::config(
                "the regressor predicts exactly 10 numbers (five points)",
            ));
        }
        if self.input_dim == 0 || self.hidden == 0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(DaeError::config("regressor sizes must be positive"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) || !(self.learning_rate > 0.0) {
            return Err(DaeError::config(
                "val_fraction must lie in [0, 1) and learning_rate be positive",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub train_l1: f64,
    pub val_l1: f64,
}

#[derive(Debug)]
pub struct LandmarkRegressor {
    cfg: RegressorConfig,
    store: ParamStore,
    hidden: Linear,
    out: Linear,
    input_mean: Tensor,
}

fn flatten_fields(fields: &WarpField) -> Result<Tensor> {
    let n = fields.batch_size();
    Ok(fields
        .grid
        .detach()
        .to_dtype(candle_core::DType::F32)?
        .reshape((n, ()))?)
}

fn targets(landmarks: &[LandmarkSet]) -> Result<Tensor> {
    let v: Vec<f32> = landmarks
        .iter()
        .flat_map(|l| l.flat())
        .map(|x| x as f32)
        .collect();
    Ok(Tensor::from_vec(v, (landmarks.len(), 10), &Device::Cpu)?)
}

fn l1(pred: &Tensor, y: &Tensor) -> Result<Tensor> {
    Ok((pred - y)?.abs()?.mean_all()?)
}

impl LandmarkRegressor {
    pub fn config(&self) -> &RegressorConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self
            .hidden
            .forward(&x.broadcast_sub(&self.input_mean)?)?
            .relu()?;
        self.out.forward(&h)
    }

    /// Predicted landmarks in pixel units, one set per field.
    pub fn predict(&self, fields: &WarpField) -> Result<Vec<LandmarkSet>> {
        let x = flatten_fields(fields)?;
        if x.dim(1)? != self.cfg.input_dim {
            return Err(DaeError::invalid(format!(
                "fields flatten to {} values, regressor expects {}",
                x.dim(1)?,
                self.cfg.input_dim
            )));
        }
        let y = self
            .forward(&x)?
            .to_dtype(candle_core::DType::F64)?
            .to_vec2::<f64>()?;
        y.iter().map(|row| LandmarkSet::from_flat(row)).collect()
    }
}

/// Fits the regressor with L1 loss. Fields are detached first, so nothing
/// upstream of them can receive gradients.
pub fn fit_landmark_regressor(
    fields: &WarpField,
    landmarks: &[LandmarkSet],
    cfg: &RegressorConfig,
) -> Result<(LandmarkRegressor, FitReport)> {
    cfg.validate()?;
    let n = fields.batch_size();
    if n != landmarks.len() || n == 0 {
        return Err(DaeError::invalid(format!(
            "{n} fields but {} landmark sets",
            landmarks.len()
        )));
    }
    let x = flatten_fields(fields)?;
    if x.dim(1)? != cfg.input_dim {
        return Err(DaeError::invalid(format!(
            "fields flatten to {} values, config says {}",
            x.dim(1)?,
            cfg.input_dim
        )));
    }
    let y = targets(landmarks)?;

    let order = epoch_order(n, cfg.seed, u64::MAX);
    let n_val = ((n as f64 * cfg.val_fraction).round() as usize).min(n - 1);
    let (val_idx, train_idx) = order.split_at(n_val);
    let pick = |t: &Tensor, idx: &[usize]| -> Result<Tensor> {
        let ids = Tensor::from_vec(
            idx.iter().map(|&i| i as u32).collect::<Vec<_>>(),
            idx.len(),
            &Device::Cpu,
        )?;
        Ok(t.index_select(&ids, 0)?)
    };
    let (xt, yt) = (pick(&x, train_idx)?, pick(&y, train_idx)?);
    let val = if n_val > 0 {
        Some((pick(&x, val_idx)?, pick(&y, val_idx)?))
    } else {
        None
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store = ParamStore::new();
    let hidden = Linear::new(
        &mut store,
        &mut rng,
        "regressor.hidden",
        cfg.input_dim,
        cfg.hidden,
    )?;
    let out = Linear::new(
        &mut store,
        &mut rng,
        "regressor.out",
        cfg.hidden,
        cfg.output,
    )?;
    store.set("regressor.out.bias", &yt.mean(0)?)?;
    let input_mean = xt.mean_keepdim(0)?;
    let reg = LandmarkRegressor {
        cfg: cfg.clone(),
        store,
        hidden,
        out,
        input_mean,
    };

    let mut adam = Adam::new(cfg.learning_rate);
    let nt = train_idx.len();
    let bs = cfg.batch_size.min(nt);
    let mut best = (f64::INFINITY, 0usize, reg.store.export()?);
    let mut report = FitReport {
        epochs_run: 0,
        best_epoch: 0,
        train_l1: f64::NAN,
        val_l1: f64::NAN,
    };
    for epoch in 0..cfg.epochs {
        let perm = epoch_order(nt, cfg.seed, epoch as u64);
        for chunk in perm.chunks(bs) {
            let (xb, yb) = (pick(&xt, chunk)?, pick(&yt, chunk)?);
            let loss = l1(&reg.forward(&xb)?, &yb)?;
            adam.step(&reg.store, &loss.backward()?)?;
        }
        let train_l1 = l1(&reg.forward(&xt)?, &yt)?.to_scalar::<f32>()? as f64;
        let val_l1 = match &val {
            Some((xv, yv)) => l1(&reg.forward(xv)?, yv)?.to_scalar::<f32>()? as f64,
            None => train_l1,
        };
        report.epochs_run = epoch + 1;
        report.train_l1 = train_l1;
        if val_l1 < best.0 {
            best = (val_l1, epoch, reg.store.export()?);
        } else if epoch - best.1 >= cfg.patience {
            break;
        }
    }
    reg.store.import(&best.2)?;
    report.best_epoch = best.1 + 1;
    report.val_l1 = best.0;
    Ok((reg, report))
}
