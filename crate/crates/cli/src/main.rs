use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use candle_core::Tensor;
use clap::{Args, Parser, Subcommand};
use dae_core::data::{
    hash_json, load_image, write_cache, Dataset, LandmarkSet, TEMPLATE_LANDMARKS,
};
use dae_core::evaluation::{
    alignment_diagnostics, annotate_average_texture, class_average_textures, decompose,
    extract_fields, fit_landmark_regressor, interpolate_latents, relight, EvalReport, Protocol,
};
use dae_core::imaging::{save_grid, Tile};
use dae_core::networks::{Backbone, Deformation, DeformingAutoencoder, LatentPart, Variant};
use dae_core::training::{load_model, train_loop};
use dae_core::DaeError;
use serde_json::json;

mod config;
mod manifest;

use config::{cache_root, partitions, DatasetConfig, RunConfig};
use manifest::Manifest;

#[derive(Debug, Parser)]
#[command(
    name = "dae",
    version,
    about = "Train and evaluate deforming autoencoders"
)]
struct Cli {
    /// TOML or JSON run configuration; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Image directory, or a preset: mnist, mnist<digit>, faces.
    #[arg(long, global = true)]
    dataset: Option<String>,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Generate and cache a sinusoidally deformed digit set.
    GenDeformedMnist(GenArgs),
    Train(TrainArgs),
    /// Landmark error of a trained model, normalised by inter-ocular distance.
    EvalLandmarks(EvalArgs),
    /// Latent interpolation between two images, or relighting with --relight.
    Interpolate(InterpArgs),
    /// Shading, albedo and warp panels for one image.
    Decompose(DecomposeArgs),
    /// Average input versus average texture.
    Diagnostics(DiagArgs),
}

#[derive(Debug, Args)]
struct GenArgs {
    /// Comma separated digits.
    #[arg(long)]
    digits: Option<String>,
    #[arg(long)]
    per_digit: Option<usize>,
    /// Directory with the IDX training files; procedural glyphs otherwise.
    #[arg(long)]
    mnist_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ModelFlags {
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    backbone: Option<Backbone>,
    #[arg(long)]
    deformation: Option<Deformation>,
    #[arg(long)]
    zt: Option<usize>,
    #[arg(long)]
    za: Option<usize>,
    #[arg(long)]
    zw: Option<usize>,
    #[arg(long)]
    zc: Option<usize>,
    #[arg(long)]
    zs: Option<usize>,
    #[arg(long)]
    zalb: Option<usize>,
    #[arg(long)]
    base_filters: Option<usize>,
    #[arg(long)]
    adversarial: bool,
    #[arg(long)]
    residual_grid: bool,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelFlags,
    #[arg(long)]
    epochs: Option<u64>,
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    resume: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Fit a landmark regressor on the training split instead of annotating the template.
    #[arg(long)]
    regressor: bool,
    /// Ten comma separated template-frame coordinates for the annotation protocol.
    #[arg(long)]
    template: Option<String>,
}

#[derive(Debug, Args)]
struct InterpArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset index or image path.
    #[arg(long)]
    source: String,
    #[arg(long)]
    target: Option<String>,
    /// Comma separated latent parts; defaults to every part except the class code.
    #[arg(long)]
    parts: Option<String>,
    #[arg(long, default_value_t = 8)]
    steps: usize,
    /// Interpolate only the shading code towards the mirrored source.
    #[arg(long)]
    relight: bool,
}

#[derive(Debug, Args)]
struct DecomposeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset index or image path.
    #[arg(long, default_value = "0")]
    image: String,
}

#[derive(Debug, Args)]
struct DiagArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 8)]
    shown: usize,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e.downcast_ref::<DaeError>().map_or("error", DaeError::kind);
            // tensor errors may carry a multi-line backtrace; keep the headline
            let full = format!("{e:#}");
            let message = full.lines().next().unwrap_or_default().trim_end();
            eprintln!("{}", json!({ "error": kind, "message": message }));
            ExitCode::from(1)
        }
    }
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(d) = &cli.dataset {
        cfg.dataset = DatasetConfig::from_flag(d)?;
    }
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
        cfg.regressor.seed = s;
    }
    if let Some(o) = &cli.output_dir {
        cfg.train.output_dir = o.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = resolve(&cli)?;
    let name = match &cli.command {
        Cmd::GenDeformedMnist(_) => "gen-deformed-mnist",
        Cmd::Train(_) => "train",
        Cmd::EvalLandmarks(_) => "eval-landmarks",
        Cmd::Interpolate(_) => "interpolate",
        Cmd::Decompose(_) => "decompose",
        Cmd::Diagnostics(_) => "diagnostics",
    };
    if let Cmd::Train(a) = &cli.command {
        apply_train_flags(&mut cfg, a)?;
    }
    if let Cmd::GenDeformedMnist(a) = &cli.command {
        apply_gen_flags(&mut cfg, a)?;
    }
    let out = cfg.train.output_dir.clone();
    let mut manifest = Manifest::start(name, &cfg, cfg.train.seed)?;
    manifest.write(&out)?;
    let result = match &cli.command {
        Cmd::GenDeformedMnist(_) => gen(&cfg),
        Cmd::Train(_) => train(&cfg),
        Cmd::EvalLandmarks(a) => eval_landmarks(&cfg, a),
        Cmd::Interpolate(a) => interpolate(&cfg, a),
        Cmd::Decompose(a) => decompose_cmd(&cfg, a),
        Cmd::Diagnostics(a) => diagnostics(&cfg, a),
    };
    manifest.finish(&result);
    manifest.write(&out)?;
    result
}

fn apply_gen_flags(cfg: &mut RunConfig, a: &GenArgs) -> Result<()> {
    if !matches!(cfg.dataset, DatasetConfig::DeformedMnist { .. }) {
        cfg.dataset = DatasetConfig::default();
    }
    if let DatasetConfig::DeformedMnist {
        digits,
        per_digit,
        mnist_dir,
        ..
    } = &mut cfg.dataset
    {
        if let Some(d) = &a.digits {
            *digits = d
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<u8>()
                        .ok()
                        .filter(|v| *v < 10)
                        .with_context(|| format!("bad digit `{s}`"))
                })
                .collect::<Result<_>>()?;
        }
        if let Some(n) = a.per_digit {
            *per_digit = n;
        }
        if a.mnist_dir.is_some() {
            *mnist_dir = a.mnist_dir.clone();
        }
    }
    Ok(())
}

fn apply_train_flags(cfg: &mut RunConfig, a: &TrainArgs) -> Result<()> {
    let t = &mut cfg.train;
    let m = &a.model;
    if let Some(v) = m.variant {
        if v == Variant::Intrinsic && t.model.variant != Variant::Intrinsic {
            let keep = t.model.clone();
            t.model = dae_core::networks::ModelConfig {
                backbone: keep.backbone,
                base_filters: keep.base_filters,
                ..dae_core::networks::ModelConfig::intrinsic(keep.channels)
            };
        }
        t.model.variant = v;
    }
    macro_rules! set {
        ($($flag:expr => $field:expr),+) => { $(if let Some(v) = $flag { $field = v; })+ };
    }
    set!(m.backbone => t.model.backbone, m.deformation => t.model.deformation, m.zt => t.model.z_texture,
        m.za => t.model.z_affine, m.zw => t.model.z_warp, m.zc => t.model.z_class, m.zs => t.model.z_shading,
        m.zalb => t.model.z_albedo, m.base_filters => t.model.base_filters, a.epochs => t.epochs,
        a.batch_size => t.batch_size, a.lr => t.learning_rate);
    if a.max_steps.is_some() {
        t.max_steps = a.max_steps;
    }
    t.model.use_adversarial |= m.adversarial;
    t.model.residual_grid |= m.residual_grid;
    t.resume |= a.resume;
    t.model.channels = cfg.dataset.channels();
    if t.model.variant == Variant::ClassAware {
        if t.model.num_classes == 0 {
            t.model.num_classes = cfg
                .dataset
                .num_classes()
                .context("class_aware needs a labelled dataset")?;
        }
        if t.model.z_class == 0 {
            t.model.z_class = 16;
        }
    } else {
        t.model.z_class = 0;
    }
    Ok(())
}

fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    Ok(cfg.dataset.load(Some(&cache_root(&cfg.train.output_dir)))?)
}

fn gen(cfg: &RunConfig) -> Result<()> {
    let out = &cfg.train.output_dir;
    let ds = cfg.dataset.load(None)?;
    let dir = out.join("dataset");
    write_cache(&dir, &ds, &hash_json(&cfg.dataset)?, None)?;
    let shown: Vec<usize> = (0..ds.len().min(16)).collect();
    save_grid(
        &out.join("preview.png"),
        &[("DEFORMED".into(), Tile::from_batch(&ds.batch(&shown)?)?)],
    )?;
    log::info!("wrote {} images to {}", ds.len(), dir.display());
    Ok(())
}

fn train(cfg: &RunConfig) -> Result<()> {
    let data = load_data(cfg)?;
    let summary = train_loop(&cfg.train, &data)?;
    let last = summary
        .last
        .map(|r| json!({ "step": r.step, "total": r.total, "recon": r.recon }));
    println!(
        "{}",
        json!({ "steps": summary.steps, "checkpoint": summary.checkpoint, "last": last })
    );
    Ok(())
}

fn open_model(path: &Path, data: &Dataset) -> Result<DeformingAutoencoder> {
    let model = load_model(path, None)?;
    let c = model.config();
    if c.channels != data.channels || c.image_side != data.side {
        bail!(
            "checkpoint expects {}-channel {}px images, dataset has {}-channel {}px",
            c.channels,
            c.image_side,
            data.channels,
            data.side
        );
    }
    Ok(model)
}

fn parse_template(text: &str) -> Result<LandmarkSet> {
    let v = text
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .with_context(|| format!("bad coordinate `{s}`"))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LandmarkSet::from_flat(&v)?)
}

fn eval_landmarks(cfg: &RunConfig, a: &EvalArgs) -> Result<()> {
    let data = load_data(cfg)?;
    if data.landmarks.is_none() {
        bail!("dataset has no landmark annotations");
    }
    let model = open_model(&a.checkpoint, &data)?;
    let (train_set, test_set) = partitions(&data, &cfg.eval)?;
    let truths = test_set.landmarks.clone().unwrap_or_default();
    let test_fields = extract_fields(&model, &test_set)?;
    let report = if a.regressor {
        let train_fields = extract_fields(&model, &train_set)?;
        let marks = train_set.landmarks.clone().unwrap_or_default();
        let (reg, fit) = fit_landmark_regressor(&train_fields, &marks, &cfg.regressor)?;
        log::info!("regressor stopped after {} epochs", fit.epochs_run);
        EvalReport::evaluate(Protocol::Regressor, &reg.predict(&test_fields)?, &truths)?
    } else {
        let template = match (&a.template, &cfg.eval.template_landmarks) {
            (Some(t), _) => parse_template(t)?,
            (None, Some(v)) => LandmarkSet::from_flat(v)?,
            (None, None) if matches!(cfg.dataset, DatasetConfig::Faces { .. }) => {
                TEMPLATE_LANDMARKS
            }
            (None, None) => {
                bail!("template annotation needs --template or eval.template_landmarks")
            }
        };
        let preds = annotate_average_texture(&template, &test_fields)?;
        EvalReport::evaluate(Protocol::TemplateAnnotation, &preds, &truths)?
    };
    let out = &cfg.train.output_dir;
    std::fs::create_dir_all(out)?;
    report.write_json(&out.join("landmarks.json"))?;
    report.write_csv(&out.join("landmarks.csv"))?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(())
}

/// A dataset index or an image file, as a `(1, C, S, S)` tensor.
fn pick_image(spec: &str, data: &Dataset) -> Result<Tensor> {
    if let Ok(i) = spec.parse::<usize>() {
        if i >= data.len() {
            bail!("index {i} is outside the dataset of {}", data.len());
        }
        return Ok(data.batch(&[i])?);
    }
    let px = load_image(Path::new(spec), data.side, data.channels)?;
    Ok(Tensor::from_vec(
        px,
        (1, data.channels, data.side, data.side),
        &candle_core::Device::Cpu,
    )?)
}

fn rows_of(
    label: &str,
    outs: &[dae_core::networks::ForwardOutput],
    pick: impl Fn(&dae_core::networks::ForwardOutput) -> Option<&Tensor>,
) -> Result<Option<(String, Vec<Tile>)>> {
    let mut tiles = Vec::new();
    for o in outs {
        match pick(o) {
            Some(t) => tiles.extend(Tile::from_batch(t)?),
            None => return Ok(None),
        }
    }
    Ok(Some((label.to_string(), tiles)))
}

fn interpolate(cfg: &RunConfig, a: &InterpArgs) -> Result<()> {
    let data = load_data(cfg)?;
    let model = open_model(&a.checkpoint, &data)?;
    let source = pick_image(&a.source, &data)?;
    let (outs, file) = if a.relight {
        (relight(&model, &source, a.steps)?, "relight.png")
    } else {
        let target = pick_image(
            a.target
                .as_deref()
                .context("--target is required unless --relight")?,
            &data,
        )?;
        let parts = match &a.parts {
            Some(p) => p
                .split(',')
                .map(|s| s.trim().parse::<LatentPart>())
                .collect::<Result<Vec<_>, _>>()?,
            None => model
                .config()
                .layout()
                .parts()
                .map(|(p, _)| p)
                .filter(|p| *p != LatentPart::Class)
                .collect(),
        };
        (
            interpolate_latents(&model, &source, &target, &parts, a.steps)?,
            "interpolation.png",
        )
    };
    let mut rows = Vec::new();
    for row in [
        rows_of("RECON", &outs, |o| Some(&o.reconstruction))?,
        rows_of("TEXTURE", &outs, |o| Some(&o.texture))?,
        rows_of("SHADING", &outs, |o| o.shading.as_ref())?,
        rows_of("ALBEDO", &outs, |o| o.albedo.as_ref())?,
    ]
    .into_iter()
    .flatten()
    {
        rows.push(row);
    }
    let path = cfg.train.output_dir.join(file);
    save_grid(&path, &rows)?;
    println!("{}", json!({ "grid": path, "steps": outs.len() }));
    Ok(())
}

fn decompose_cmd(cfg: &RunConfig, a: &DecomposeArgs) -> Result<()> {
    let data = load_data(cfg)?;
    let model = open_model(&a.checkpoint, &data)?;
    let image = pick_image(&a.image, &data)?;
    let panels = decompose(&model, &image)?;
    let rows: Vec<(String, Vec<Tile>)> = panels.into_iter().map(|(l, t)| (l, vec![t])).collect();
    let path = cfg.train.output_dir.join("decompose.png");
    save_grid(&path, &rows)?;
    println!("{}", json!({ "grid": path }));
    Ok(())
}

fn diagnostics(cfg: &RunConfig, a: &DiagArgs) -> Result<()> {
    let data = load_data(cfg)?;
    let model = open_model(&a.checkpoint, &data)?;
    let d = alignment_diagnostics(&model, &data, a.shown)?;
    let out = &cfg.train.output_dir;
    save_grid(&out.join("diagnostics.png"), &d.panels)?;
    let mut summary = json!({
        "n": data.len(),
        "input_variance": d.mean_input_variance(),
        "texture_variance": d.mean_texture_variance(),
    });
    if model.config().variant == Variant::ClassAware && data.labels.is_some() {
        let avgs = class_average_textures(&model, &data)?;
        let classes: Vec<u32> = avgs.iter().map(|a| a.label).collect();
        let rows = [
            (
                "CLASS AVG".to_string(),
                avgs.iter().map(|a| a.texture.clone()).collect(),
            ),
            (
                "PLACED".to_string(),
                avgs.into_iter().map(|a| a.placed).collect(),
            ),
        ];
        save_grid(&out.join("class_averages.png"), &rows)?;
        summary["classes"] = json!(classes);
    }
    std::fs::write(
        out.join("diagnostics.json"),
        serde_json::to_vec_pretty(&summary)?,
    )?;
    println!("{summary}");
    Ok(())
}
