//! TOML run configuration. Command-line flags are applied on top of the file.

use std::path::{Path, PathBuf};

use kronsep::data::{load_idx, synthetic_gaussians};
use kronsep::{Activation, Dataset, LayerSpec, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// One independently initialized model per seed. Empty means `[train.seed]`.
    pub seeds: Vec<u64>,
    pub dataset: DatasetConfig,
    pub layers: Vec<LayerConfig>,
    pub train: TrainConfig,
    pub output: OutputConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seeds: Vec::new(),
            dataset: DatasetConfig::default(),
            layers: vec![
                LayerConfig {
                    factors: vec![[6, 4], [6, 4]],
                    activation: Activation::Relu,
                    bias: true,
                    replaces: None,
                },
                LayerConfig {
                    factors: vec![[2, 6], [2, 6]],
                    activation: Activation::Identity,
                    bias: true,
                    replaces: None,
                },
            ],
            train: TrainConfig {
                epochs: 20,
                batch_size: 20,
                adam: kronsep::AdamConfig {
                    lr: 1e-2,
                    ..Default::default()
                },
                ..TrainConfig::default()
            },
            output: OutputConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DatasetConfig {
    /// Seeded Gaussian blobs; the first `train` samples train, the rest test.
    Synthetic {
        classes: usize,
        per_class: usize,
        shape: Vec<usize>,
        separation: f64,
        seed: u64,
        train: usize,
    },
    /// IDX image/label files. Without a test pair, evaluation uses the training set.
    Idx {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_images: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_labels: Option<PathBuf>,
        /// Per-sample shape; must hold the same number of pixels as an image.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        shape: Option<Vec<usize>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        limit: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_limit: Option<usize>,
    },
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Synthetic {
            classes: 4,
            per_class: 100,
            shape: vec![4, 4],
            separation: 1.5,
            seed: 0,
            train: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerConfig {
    pub factors: Vec<[usize; 2]>,
    pub activation: Activation,
    #[serde(default = "yes")]
    pub bias: bool,
    /// `[rows, cols]` of a dense layer this one stands in for; used for reported parameter counts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replaces: Option<[usize; 2]>,
}

fn yes() -> bool {
    true
}

impl LayerConfig {
    pub fn spec(&self) -> LayerSpec {
        LayerSpec {
            factors: self.factors.clone(),
            activation: self.activation,
            bias: self.bias,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    /// With several seeds, `-seed<N>` is inserted before the extension.
    pub checkpoint: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<PathBuf>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            checkpoint: PathBuf::from("kronsep-checkpoint.json"),
            report: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config is always representable as TOML")
    }

    pub fn effective_seeds(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            vec![self.train.seed]
        } else {
            self.seeds.clone()
        }
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(LayerConfig::spec).collect()
    }

    /// Output length of the last layer.
    pub fn classes(&self) -> Result<usize, CliError> {
        let last = self
            .layers
            .last()
            .ok_or_else(|| CliError::Usage("config declares no layers".into()))?;
        Ok(last.factors.iter().map(|f| f[0]).product())
    }

    pub fn replaces(&self) -> Vec<Option<[usize; 2]>> {
        self.layers.iter().map(|l| l.replaces).collect()
    }
}

impl DatasetConfig {
    /// Loads `(train, test)`.
    pub fn load(&self) -> Result<(Dataset, Dataset), CliError> {
        match self {
            DatasetConfig::Synthetic {
                classes,
                per_class,
                shape,
                separation,
                seed,
                train,
            } => {
                let ds = synthetic_gaussians(*classes, *per_class, shape, *separation, *seed)
                    .map_err(CliError::from_core)?;
                if *train > ds.len() {
                    return Err(CliError::Usage(format!(
                        "dataset.train = {train} exceeds the {} generated samples",
                        ds.len()
                    )));
                }
                Ok(ds.split(*train))
            }
            DatasetConfig::Idx {
                images,
                labels,
                test_images,
                test_labels,
                shape,
                limit,
                test_limit,
            } => {
                let prepare = |ds: Dataset, limit: &Option<usize>| -> Result<Dataset, CliError> {
                    let ds = match limit {
                        Some(n) => ds.take(*n),
                        None => ds,
                    };
                    match shape {
                        Some(s) => ds.reshape(s).map_err(CliError::from_core),
                        None => Ok(ds),
                    }
                };
                let train = prepare(load_idx(images, labels).map_err(CliError::from_core)?, limit)?;
                let test = match (test_images, test_labels) {
                    (Some(i), Some(l)) => {
                        prepare(load_idx(i, l).map_err(CliError::from_core)?, test_limit)?
                    }
                    (None, None) => train.clone(),
                    _ => {
                        return Err(CliError::Usage(
                            "dataset.test_images and dataset.test_labels must be given together".into(),
                        ))
                    }
                };
                Ok((train, test))
            }
        }
    }

    pub fn describe(&self) -> String {
        match self {
            DatasetConfig::Synthetic {
                classes,
                per_class,
                shape,
                separation,
                seed,
                train,
            } => format!(
                "synthetic classes={classes} per_class={per_class} shape={shape:?} separation={separation} seed={seed} train={train}"
            ),
            DatasetConfig::Idx { images, labels, .. } => {
                format!("idx images={} labels={}", images.display(), labels.display())
            }
        }
    }
}

/// `model.json` with seed 3 becomes `model-seed3.json`.
pub fn seeded_path(path: &Path, seed: u64) -> PathBuf {
    let stem = path.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
    let name = match path.extension() {
        Some(ext) => format!("{stem}-seed{seed}.{}", ext.to_string_lossy()),
        None => format!("{stem}-seed{seed}"),
    };
    path.with_file_name(name)
}
