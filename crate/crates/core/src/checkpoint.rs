//! Versioned JSON checkpoints.
//!
//! Floats are written in shortest round-trip decimal form and parsed with
//! correct rounding, so every parameter (including `-0.0`) survives a
//! save/load cycle bit for bit. Files are written to a temporary sibling and
//! renamed into place.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, Layer, SepMlp};
use crate::septrans::SeparableTransform;
use crate::tensor::Matrix;
use crate::train::{TrainConfig, TrainReport};

pub const FORMAT: &str = "kronsep-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: SepMlp,
    /// Per layer, the `[rows, cols]` of a dense layer this one stands in for.
    pub replaces: Vec<Option<[usize; 2]>>,
    pub train_config: Option<TrainConfig>,
    pub report: Option<TrainReport>,
}

impl Checkpoint {
    pub fn new(model: SepMlp) -> Self {
        let n = model.layers().len();
        Self {
            model,
            replaces: vec![None; n],
            train_config: None,
            report: None,
        }
    }

    pub fn with_training(mut self, cfg: TrainConfig, report: TrainReport) -> Self {
        self.train_config = Some(cfg);
        self.report = Some(report);
        self
    }

    /// Dense parameter count shown for a layer: the replaced layer's
    /// `rows * cols + bias` when annotated, else the Kronecker-equivalent count.
    pub fn reported_dense(&self, layer: usize) -> usize {
        let t = &self.model.layers()[layer].transform;
        match self.replaces.get(layer).copied().flatten() {
            Some([r, c]) => r * c + t.bias().map_or(0, <[f64]>::len),
            None => t.param_count().dense,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        if self.replaces.len() != self.model.layers().len() {
            return Err(Error::Checkpoint(format!(
                "{} layer annotations for {} layers",
                self.replaces.len(),
                self.model.layers().len()
            )));
        }
        let doc = Document {
            format: FORMAT.to_string(),
            version: VERSION,
            classes: self.model.classes(),
            layers: self
                .model
                .layers()
                .iter()
                .zip(&self.replaces)
                .map(|(l, r)| LayerDoc {
                    activation: l.activation,
                    factors: l
                        .transform
                        .factors()
                        .iter()
                        .map(|f| FactorDoc {
                            rows: f.rows(),
                            cols: f.cols(),
                            data: f.as_slice().to_vec(),
                        })
                        .collect(),
                    bias: l.transform.bias().map(<[f64]>::to_vec),
                    replaces: *r,
                })
                .collect(),
            train_config: self.train_config.clone(),
            metrics: self.report.clone(),
        };
        serde_json::to_string_pretty(&doc).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let version = value
            .get("version")
            .ok_or_else(|| Error::Checkpoint("missing `version` field".into()))?
            .as_u64()
            .ok_or_else(|| Error::Checkpoint("`version` must be an unsigned integer".into()))?;
        if version != u64::from(VERSION) {
            return Err(Error::CheckpointVersion {
                found: u32::try_from(version).unwrap_or(u32::MAX),
                expected: VERSION,
            });
        }
        let doc: Document =
            serde_json::from_value(value).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if doc.format != FORMAT {
            return Err(Error::Checkpoint(format!("unknown format `{}`", doc.format)));
        }
        let mut layers = Vec::with_capacity(doc.layers.len());
        let mut replaces = Vec::with_capacity(doc.layers.len());
        for (i, l) in doc.layers.into_iter().enumerate() {
            let factors = l
                .factors
                .into_iter()
                .map(|f| {
                    Matrix::new(f.rows, f.cols, f.data)
                        .map_err(|e| Error::Checkpoint(format!("layer {i}: {e}")))
                })
                .collect::<Result<Vec<_>>>()?;
            let transform = SeparableTransform::new(factors, l.bias)
                .map_err(|e| Error::Checkpoint(format!("layer {i}: {e}")))?;
            layers.push(Layer {
                transform,
                activation: l.activation,
            });
            replaces.push(l.replaces);
        }
        let model =
            SepMlp::new(layers, doc.classes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if model.factors().iter().any(|f| !f.is_finite()) {
            return Err(Error::Checkpoint("non-finite parameter".into()));
        }
        Ok(Self {
            model,
            replaces,
            train_config: doc.train_config,
            report: doc.metrics,
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Document {
    format: String,
    version: u32,
    classes: usize,
    layers: Vec<LayerDoc>,
    #[serde(default)]
    train_config: Option<TrainConfig>,
    #[serde(default)]
    metrics: Option<TrainReport>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerDoc {
    activation: Activation,
    factors: Vec<FactorDoc>,
    #[serde(default)]
    bias: Option<Vec<f64>>,
    #[serde(default)]
    replaces: Option<[usize; 2]>,
}

/// Column-major entries.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FactorDoc {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// Writes atomically: temporary file in the target directory, then rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(contents).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let mut text = checkpoint.to_json()?;
    text.push('\n');
    write_atomic(path.as_ref(), text.as_bytes())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_json(&text)
}
