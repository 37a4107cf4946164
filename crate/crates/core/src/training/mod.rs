//! Optimisation loop: objective assembly, the discriminator/generator
//! alternation, checkpointing, metrics CSV and sample grids.

mod adam;
mod checkpoint;

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use candle_core::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::Adam;
pub use checkpoint::{
    load_checkpoint, save_checkpoint, section, Checkpoint, TrainState, FORMAT_VERSION,
};

use crate::data::Dataset;
use crate::error::{DaeError, Result};
use crate::imaging::{save_grid, Tile};
use crate::losses::{
    aggregate, bias_reduce, class_cross_entropy, lsgan_discriminator, lsgan_generator, recon_l2,
    shade_smooth, smooth_tv, total_variation, LossParts, LossReport, LossWeights,
};
use crate::networks::{
    DeformingAutoencoder, ForwardOutput, ModelConfig, ParamStore, PatchDiscriminator, Variant,
};

const DISC_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: u64,
    /// Stops early once this many optimisation steps have run in total.
    pub max_steps: Option<u64>,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub model: ModelConfig,
    pub weights: LossWeights,
    /// Epochs between checkpoints; 0 keeps only the final one.
    pub checkpoint_every: u64,
    pub checkpoint_every_steps: Option<u64>,
    /// Epochs between sample grids; 0 keeps only the final one.
    pub sample_every: u64,
    pub grid_samples: usize,
    pub output_dir: PathBuf,
    pub resume: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            max_steps: None,
            batch_size: 64,
            learning_rate: 2e-4,
            seed: 0,
            model: ModelConfig::default(),
            weights: LossWeights::default(),
            checkpoint_every: 1,
            checkpoint_every_steps: None,
            sample_every: 1,
            grid_samples: 8,
            output_dir: PathBuf::from("runs/default"),
            resume: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(DaeError::config("epochs and batch_size must be positive"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(DaeError::config(
                "learning_rate must be finite and non-negative",
            ));
        }
        if self.max_steps == Some(0) || self.checkpoint_every_steps == Some(0) {
            return Err(DaeError::config("step counts must be positive when given"));
        }
        self.model.validate()?;
        self.weights.validate()
    }
}

/// Model, optional discriminator and both optimisers.
#[derive(Debug)]
pub struct Trainer {
    pub model: DeformingAutoencoder,
    pub disc: Option<PatchDiscriminator>,
    pub state: TrainState,
    adam: Adam,
    disc_adam: Adam,
    weights: LossWeights,
    dump_dir: Option<PathBuf>,
}

/// Loss components for a forward pass; `fake_logits` are the discriminator's
/// scores of the reconstruction when the adversarial term is active.
pub fn objective(
    model_cfg: &ModelConfig,
    out: &ForwardOutput,
    images: &Tensor,
    labels: Option<&Tensor>,
    weights: &LossWeights,
    fake_logits: Option<&Tensor>,
) -> Result<LossParts> {
    let mut parts = LossParts {
        recon: Some(recon_l2(&out.reconstruction, images)?),
        ..Default::default()
    };
    let smooth = match (&out.increments, &out.residual) {
        (Some(d), _) => smooth_tv(d, weights.smooth, weights.reduction)?,
        (None, Some(r)) => (total_variation(r, weights.reduction)? * weights.smooth)?,
        (None, None) => Tensor::zeros((), images.dtype(), images.device())?,
    };
    parts.smooth = Some(smooth);
    parts.bias = Some(bias_reduce(&out.affine, &out.local_field, weights)?);
    if model_cfg.variant == Variant::Intrinsic {
        let s = out
            .shading
            .as_ref()
            .ok_or_else(|| DaeError::config("intrinsic output lacks shading"))?;
        parts.shade = Some(shade_smooth(s, weights.shade, weights.reduction)?);
    }
    if model_cfg.variant == Variant::ClassAware {
        let logits = out
            .class_logits
            .as_ref()
            .ok_or_else(|| DaeError::config("class output missing"))?;
        let labels = labels.ok_or_else(|| DaeError::config("class_aware training needs labels"))?;
        parts.ce = Some(class_cross_entropy(logits, labels)?);
    }
    if let Some(f) = fake_logits {
        parts.adv_g = Some(lsgan_generator(f)?);
    }
    Ok(parts)
}

fn params_finite(store: &ParamStore) -> Result<Option<String>> {
    for (name, var) in store.vars() {
        let s = var.as_tensor().sum_all()?.to_scalar::<f32>()?;
        if !s.is_finite() {
            return Ok(Some(name.to_string()));
        }
    }
    Ok(None)
}

impl Trainer {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = DeformingAutoencoder::new(cfg.model.clone(), cfg.seed)?;
        let disc = if cfg.model.use_adversarial {
            Some(PatchDiscriminator::new(
                cfg.model.channels,
                cfg.model.base_filters,
                cfg.seed ^ DISC_SEED_SALT,
            )?)
        } else {
            None
        };
        Ok(Self {
            model,
            disc,
            state: TrainState::default(),
            adam: Adam::new(cfg.learning_rate),
            disc_adam: Adam::new(cfg.learning_rate),
            weights: cfg.weights.clone(),
            dump_dir: Some(cfg.output_dir.join("diagnostics")),
        })
    }

    /// Rebuilds a trainer from a checkpoint written for `cfg.model`.
    pub fn from_checkpoint(cfg: &TrainConfig, ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.model != cfg.model {
            return Err(DaeError::Checkpoint(
                "checkpoint was written for a different model config".into(),
            ));
        }
        let mut t = Self::new(cfg)?;
        t.model.params().import(&section(&ckpt.tensors, "model/"))?;
        t.adam.import("adam/", &ckpt.tensors, ckpt.state.adam_t)?;
        if let Some(d) = &t.disc {
            d.params().import(&section(&ckpt.tensors, "disc/"))?;
            t.disc_adam
                .import("disc_adam/", &ckpt.tensors, ckpt.state.disc_adam_t)?;
        }
        t.state = ckpt.state;
        Ok(t)
    }

    pub fn checkpoint(&self, train: Option<&TrainConfig>) -> Result<Checkpoint> {
        let mut tensors = std::collections::BTreeMap::new();
        for (k, v) in self.model.params().export()? {
            tensors.insert(format!("model/{k}"), v);
        }
        tensors.extend(self.adam.export("adam/"));
        if let Some(d) = &self.disc {
            for (k, v) in d.params().export()? {
                tensors.insert(format!("disc/{k}"), v);
            }
            tensors.extend(self.disc_adam.export("disc_adam/"));
        }
        let mut state = self.state;
        state.adam_t = self.adam.t;
        state.disc_adam_t = self.disc_adam.t;
        Ok(Checkpoint {
            model: self.model.config().clone(),
            train: train.cloned(),
            state,
            tensors,
        })
    }

    pub fn set_dump_dir(&mut self, dir: Option<PathBuf>) {
        self.dump_dir = dir;
    }

    /// One optimisation step. With the adversarial term, the discriminator is
    /// updated first on the detached reconstruction, then the generator
    /// against the updated discriminator.
    pub fn train_step(&mut self, images: &Tensor, labels: Option<&Tensor>) -> Result<LossReport> {
        let cfg = self.model.config().clone();
        let out = self.model.forward(images, true)?;
        let mut adv_d = None;
        let fake_logits = match &self.disc {
            Some(disc) => {
                let real = disc.forward(images, true)?;
                let fake = disc.forward(&out.reconstruction.detach(), true)?;
                let d_loss = lsgan_discriminator(&real, &fake)?;
                let v = d_loss.to_scalar::<f32>()? as f64;
                if v.is_finite() {
                    let grads = d_loss.backward()?;
                    self.disc_adam.step(disc.params(), &grads)?;
                }
                adv_d = Some(v);
                Some(disc.forward(&out.reconstruction, true)?)
            }
            None => None,
        };
        let mut parts = objective(
            &cfg,
            &out,
            images,
            labels,
            &self.weights,
            fake_logits.as_ref(),
        )?;
        parts.adv_d = adv_d;
        let agg = aggregate(cfg.variant, self.disc.is_some(), &parts, &self.weights)?;
        self.state.step += 1;
        let mut report = agg.report;
        report.step = self.state.step;
        if !report.is_finite() {
            let summary = format!("{report:?}");
            self.dump(images, &report)?;
            return Err(DaeError::NonFinite {
                step: report.step,
                summary,
            });
        }
        let grads = agg.total.backward()?;
        self.adam.step(self.model.params(), &grads)?;
        if let Some(name) = params_finite(self.model.params())? {
            self.dump(images, &report)?;
            return Err(DaeError::NonFinite {
                step: report.step,
                summary: format!("parameter `{name}` became non-finite"),
            });
        }
        Ok(report)
    }

    fn dump(&self, images: &Tensor, report: &LossReport) -> Result<()> {
        let Some(dir) = &self.dump_dir else {
            return Ok(());
        };
        std::fs::create_dir_all(dir)?;
        let stem = dir.join(format!("nonfinite-step{:08}", report.step));
        let flat = images.flatten_all()?;
        let stats = serde_json::json!({
            "step": report.step,
            "components": report,
            "input_shape": images.dims(),
            "input_min": flat.min(0)?.to_scalar::<f32>()?,
            "input_max": flat.max(0)?.to_scalar::<f32>()?,
        });
        std::fs::write(
            stem.with_extension("json"),
            serde_json::to_vec_pretty(&stats)?,
        )?;
        let mut map = HashMap::new();
        map.insert("inputs".to_string(), images.clone());
        candle_core::safetensors::save(&map, stem.with_extension("safetensors"))?;
        log::error!(
            "non-finite loss at step {}; dump written to {}",
            report.step,
            stem.display()
        );
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub steps: u64,
    pub last: Option<LossReport>,
    pub metrics: PathBuf,
    pub checkpoint: PathBuf,
    pub grids: Vec<PathBuf>,
}

pub fn metrics_path(out: &Path) -> PathBuf {
    out.join("metrics.csv")
}

pub fn latest_checkpoint(out: &Path) -> PathBuf {
    out.join("checkpoints").join("latest.safetensors")
}

fn write_checkpoint(trainer: &Trainer, cfg: &TrainConfig) -> Result<PathBuf> {
    let dir = cfg.output_dir.join("checkpoints");
    let ckpt = trainer.checkpoint(Some(cfg))?;
    let path = dir.join(format!("step-{:08}.safetensors", trainer.state.step));
    save_checkpoint(&path, &ckpt)?;
    save_checkpoint(&latest_checkpoint(&cfg.output_dir), &ckpt)?;
    Ok(path)
}

/// Opens the metrics CSV; when resuming, rows past `step` are discarded.
fn open_metrics(path: &Path, resume_step: Option<u64>) -> Result<csv::Writer<File>> {
    let mut kept = Vec::new();
    if let Some(step) = resume_step {
        if path.exists() {
            for line in BufReader::new(File::open(path)?).lines().skip(1) {
                let line = line?;
                let s: Option<u64> = line.split(',').next().and_then(|v| v.parse().ok());
                if s.is_some_and(|s| s <= step) {
                    kept.push(line);
                }
            }
        }
    }
    let mut f = File::create(path)?;
    writeln!(f, "{}", LossReport::HEADER.join(","))?;
    for line in kept {
        writeln!(f, "{line}")?;
    }
    drop(f);
    let f = OpenOptions::new().append(true).open(path)?;
    Ok(csv::WriterBuilder::new().has_headers(false).from_writer(f))
}

/// Input, reconstruction and appearance rows for the first few images.
pub fn sample_grid(model: &DeformingAutoencoder, images: &Tensor, path: &Path) -> Result<()> {
    let out = model.forward(images, false)?;
    let mut rows = vec![
        ("INPUT".to_string(), Tile::from_batch(images)?),
        ("RECON".to_string(), Tile::from_batch(&out.reconstruction)?),
        ("TEXTURE".to_string(), Tile::from_batch(&out.texture)?),
    ];
    if let (Some(s), Some(a)) = (&out.shading, &out.albedo) {
        rows.push(("SHADING".to_string(), Tile::from_batch(s)?));
        rows.push(("ALBEDO".to_string(), Tile::from_batch(a)?));
    }
    save_grid(path, &rows)
}

/// Epoch order: a seeded shuffle that depends only on `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Trains on `data` as described by `cfg`, resuming from the latest
/// checkpoint in `cfg.output_dir` when `cfg.resume` is set.
pub fn train_loop(cfg: &TrainConfig, data: &Dataset) -> Result<RunSummary> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(DaeError::invalid("training set is empty"));
    }
    if data.channels != cfg.model.channels || data.side != cfg.model.image_side {
        return Err(DaeError::config(format!(
            "dataset holds {}x{}x{} images but the model expects {}x{}x{}",
            data.channels,
            data.side,
            data.side,
            cfg.model.channels,
            cfg.model.image_side,
            cfg.model.image_side
        )));
    }
    if cfg.model.variant == Variant::ClassAware && data.labels.is_none() {
        return Err(DaeError::config("class_aware training needs labelled data"));
    }
    let out = &cfg.output_dir;
    std::fs::create_dir_all(out)?;
    let latest = latest_checkpoint(out);
    let mut trainer = if cfg.resume && latest.exists() {
        let ckpt = load_checkpoint(&latest, Some(&cfg.model))?;
        log::info!("resuming from step {}", ckpt.state.step);
        Trainer::from_checkpoint(cfg, &ckpt)?
    } else {
        Trainer::new(cfg)?
    };
    let resumed = (trainer.state.step > 0).then_some(trainer.state.step);
    let metrics = metrics_path(out);
    let mut writer = open_metrics(&metrics, resumed)?;

    let n = data.len();
    let bs = cfg.batch_size.min(n);
    let per_epoch = (n / bs) as u64;
    let shown: Vec<usize> = (0..cfg.grid_samples.min(n)).collect();
    let grid_images = data.batch(&shown)?;
    let mut grids = Vec::new();
    let mut last = None;
    let budget_left = |t: &Trainer| cfg.max_steps.is_none_or(|m| t.state.step < m);

    'epochs: while trainer.state.epoch < cfg.epochs {
        let epoch = trainer.state.epoch;
        let order = epoch_order(n, cfg.seed, epoch);
        while trainer.state.batch_in_epoch < per_epoch {
            if !budget_left(&trainer) {
                break 'epochs;
            }
            let b = trainer.state.batch_in_epoch as usize;
            let idx = &order[b * bs..(b + 1) * bs];
            let images = data.batch(idx)?;
            let labels = match cfg.model.variant {
                Variant::ClassAware => Some(data.label_batch(idx)?),
                _ => None,
            };
            let report = trainer.train_step(&images, labels.as_ref())?;
            writer.serialize(report)?;
            writer.flush()?;
            trainer.state.batch_in_epoch += 1;
            last = Some(report);
            if report.step % 50 == 0 {
                log::info!(
                    "step {} total {:.6} recon {:.6}",
                    report.step,
                    report.total,
                    report.recon
                );
            }
            if cfg
                .checkpoint_every_steps
                .is_some_and(|k| report.step % k == 0)
            {
                write_checkpoint(&trainer, cfg)?;
            }
        }
        trainer.state.epoch += 1;
        trainer.state.batch_in_epoch = 0;
        let done = trainer.state.epoch;
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
            write_checkpoint(&trainer, cfg)?;
        }
        if cfg.sample_every > 0 && done % cfg.sample_every == 0 && !shown.is_empty() {
            let p = out.join("samples").join(format!("epoch-{done:04}.png"));
            sample_grid(&trainer.model, &grid_images, &p)?;
            grids.push(p);
        }
    }
    let checkpoint = write_checkpoint(&trainer, cfg)?;
    if !shown.is_empty() {
        let p = out.join("samples").join("final.png");
        sample_grid(&trainer.model, &grid_images, &p)?;
        grids.push(p);
    }
    Ok(RunSummary {
        steps: trainer.state.step,
        last,
        metrics,
        checkpoint,
        grids,
    })
}

/// Restores a model (without optimiser state) from a checkpoint file.
pub fn load_model(path: &Path, expect: Option<&ModelConfig>) -> Result<DeformingAutoencoder> {
    let ckpt = load_checkpoint(path, expect)?;
    let seed = ckpt.train.as_ref().map(|t| t.seed).unwrap_or(0);
    let model = DeformingAutoencoder::new(ckpt.model.clone(), seed)?;
    model.params().import(&section(&ckpt.tensors, "model/"))?;
    Ok(model)
}
