//! Run configuration: a TOML or JSON file merged with command-line overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dae_core::data::{
    generate_deformed_mnist, hash_json, load_image_folder, load_landmarks, read_cache, split,
    write_cache, BaseSet, CropFrame, Dataset, DeformSpec, FaceSpec, LandmarkOrder, SyntheticFaces,
};
use dae_core::evaluation::RegressorConfig;
use dae_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

pub const CACHE_ENV: &str = "DAE_CACHE_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    DeformedMnist {
        #[serde(default = "all_digits")]
        digits: Vec<u8>,
        #[serde(default = "default_per_digit")]
        per_digit: usize,
        /// Directory holding `train-images-idx3-ubyte` and `train-labels-idx1-ubyte`;
        /// procedural glyphs are used when absent.
        #[serde(default)]
        mnist_dir: Option<PathBuf>,
        #[serde(default)]
        base_seed: u64,
        #[serde(default)]
        deform: DeformSpec,
    },
    Faces {
        #[serde(default)]
        faces: FaceSpec,
    },
    Folder {
        path: PathBuf,
        #[serde(default)]
        landmarks: Option<PathBuf>,
        #[serde(default)]
        order: LandmarkOrder,
        /// Size of the original images the landmark file refers to.
        #[serde(default)]
        original_size: Option<[f64; 2]>,
        #[serde(default = "three")]
        channels: usize,
    },
}

fn all_digits() -> Vec<u8> {
    (0..10).collect()
}

fn default_per_digit() -> usize {
    500
}

fn three() -> usize {
    3
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::DeformedMnist {
            digits: all_digits(),
            per_digit: default_per_digit(),
            mnist_dir: None,
            base_seed: 0,
            deform: DeformSpec::default(),
        }
    }
}

impl DatasetConfig {
    /// Parses `--dataset`: an existing directory, or one of the presets
    /// `mnist`, `mnist<digit>` and `faces`.
    pub fn from_flag(value: &str) -> Result<Self> {
        let path = Path::new(value);
        if path.is_dir() {
            let lm = path.join("landmarks.txt");
            return Ok(DatasetConfig::Folder {
                path: path.to_path_buf(),
                landmarks: lm.exists().then_some(lm),
                order: LandmarkOrder::default(),
                original_size: None,
                channels: 3,
            });
        }
        if value == "faces" {
            return Ok(DatasetConfig::Faces {
                faces: FaceSpec::default(),
            });
        }
        if let Some(rest) = value.strip_prefix("mnist") {
            let digits = if rest.is_empty() {
                all_digits()
            } else {
                vec![rest
                    .parse::<u8>()
                    .ok()
                    .filter(|d| *d < 10)
                    .with_context(|| format!("bad digit in `{value}`"))?]
            };
            return Ok(DatasetConfig::DeformedMnist {
                digits,
                per_digit: default_per_digit(),
                mnist_dir: None,
                base_seed: 0,
                deform: DeformSpec::default(),
            });
        }
        bail!("dataset `{value}` is neither a directory nor one of mnist, mnist<digit>, faces")
    }

    pub fn channels(&self) -> usize {
        match self {
            DatasetConfig::DeformedMnist { .. } => 1,
            DatasetConfig::Faces { .. } => 3,
            DatasetConfig::Folder { channels, .. } => *channels,
        }
    }

    /// Label count for class-aware training; labels are the digit values.
    pub fn num_classes(&self) -> Option<usize> {
        match self {
            DatasetConfig::DeformedMnist { digits, .. } => {
                digits.iter().max().map(|&d| d as usize + 1)
            }
            _ => None,
        }
    }

    fn build(&self) -> Result<Dataset> {
        Ok(match self {
            DatasetConfig::DeformedMnist {
                digits,
                per_digit,
                mnist_dir,
                base_seed,
                deform,
            } => {
                let base = match mnist_dir {
                    Some(dir) => BaseSet::from_idx(
                        &dir.join("train-images-idx3-ubyte"),
                        &dir.join("train-labels-idx1-ubyte"),
                        digits,
                        Some(per_digit * digits.len()),
                    )?,
                    None => BaseSet::procedural(digits, *per_digit, *base_seed)?,
                };
                generate_deformed_mnist(deform, &base)?
            }
            DatasetConfig::Faces { faces } => SyntheticFaces::generate(faces)?.dataset,
            DatasetConfig::Folder {
                path,
                landmarks,
                order,
                original_size,
                channels,
            } => {
                let mut ds = load_image_folder(path, 64, *channels)?;
                if let Some(lm) = landmarks {
                    let frame = original_size.map(|[w, h]| CropFrame {
                        width: w,
                        height: h,
                        side: 64,
                    });
                    let file = load_landmarks(lm, *order, frame)?;
                    let sets = ds
                        .ids
                        .iter()
                        .map(|id| {
                            file.sets
                                .get(id)
                                .copied()
                                .with_context(|| format!("no landmarks for {id}"))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    ds.landmarks = Some(sets);
                }
                ds
            }
        })
    }

    /// Builds the dataset, reusing a cached copy for generated sets.
    pub fn load(&self, cache_root: Option<&Path>) -> Result<Dataset> {
        if matches!(self, DatasetConfig::Folder { .. }) {
            return self.build();
        }
        let hash = hash_json(self)?;
        let Some(root) = cache_root else {
            return self.build();
        };
        let dir = root.join(&hash[..16]);
        if let Some((ds, _)) = read_cache(&dir, Some(&hash))? {
            log::info!("dataset loaded from cache {}", dir.display());
            return Ok(ds);
        }
        let ds = self.build()?;
        write_cache(&dir, &ds, &hash, None)?;
        Ok(ds)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Train/test fractions used by evaluation commands.
    pub split: Vec<f64>,
    pub split_seed: u64,
    /// Template-frame landmarks for the annotation protocol, ten numbers.
    pub template_landmarks: Option<Vec<f64>>,
    /// File of held-out image ids, one per line; replaces the random split.
    pub test_list: Option<PathBuf>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            split: vec![0.95, 0.05],
            split_seed: 0,
            template_landmarks: None,
            test_list: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub regressor: RegressorConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let is_json = path.extension().is_some_and(|e| e == "json");
        let cfg = if is_json {
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        } else {
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        };
        Ok(cfg)
    }
}

/// Cache directory: `DAE_CACHE_DIR` when set, otherwise inside the output directory.
pub fn cache_root(output_dir: &Path) -> PathBuf {
    std::env::var_os(CACHE_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| output_dir.join("cache"))
}

/// Train and held-out partitions of `data` under `eval`.
pub fn partitions(data: &Dataset, eval: &EvalConfig) -> Result<(Dataset, Dataset)> {
    if let Some(list) = &eval.test_list {
        let text =
            std::fs::read_to_string(list).with_context(|| format!("reading {}", list.display()))?;
        let held: std::collections::HashSet<&str> = text
            .lines()
            .filter_map(|l| l.split_whitespace().next())
            .collect();
        let (test, train): (Vec<usize>, Vec<usize>) =
            (0..data.len()).partition(|&i| held.contains(data.ids[i].as_str()));
        if test.is_empty() || train.is_empty() {
            bail!("test list {} leaves an empty partition", list.display());
        }
        return Ok((data.subset(&train), data.subset(&test)));
    }
    let parts = split(data.len(), &eval.split, eval.split_seed)?;
    if parts.len() != 2 {
        bail!("eval.split must have exactly two fractions");
    }
    Ok((data.subset(&parts[0]), data.subset(&parts[1])))
}
