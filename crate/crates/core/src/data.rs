//! Datasets: IDX (MNIST) files and seeded synthetic Gaussian blobs.
//!
//! Synthetic data uses ChaCha8 (`rand_chacha`) seeded through
//! `SeedableRng::seed_from_u64`; that generator's output stream is fixed
//! across platforms and releases.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x: Tensor,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    classes: usize,
    shape: Vec<usize>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, classes: usize, shape: Vec<usize>) -> Result<Self> {
        for s in &samples {
            if s.x.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    expected: shape.clone(),
                    actual: s.x.shape().to_vec(),
                });
            }
            if s.label >= classes {
                return Err(Error::LabelOutOfRange {
                    label: s.label,
                    classes,
                });
            }
            if let Some(&value) = s.x.vec().iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::InputOutOfRange {
                    value,
                    lo: 0.0,
                    hi: 1.0,
                });
            }
        }
        Ok(Self {
            samples,
            classes,
            shape,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Reinterprets every sample with a new shape of the same element count.
    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let samples = self
            .samples
            .into_iter()
            .map(|s| {
                Ok(Sample {
                    x: s.x.reshape(shape)?,
                    label: s.label,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            samples,
            classes: self.classes,
            shape: shape.to_vec(),
        })
    }

    /// First `n` samples (or all of them).
    pub fn take(&self, n: usize) -> Self {
        Self {
            samples: self.samples.iter().take(n).cloned().collect(),
            classes: self.classes,
            shape: self.shape.clone(),
        }
    }

    /// Splits off the first `n` samples; returns `(head, tail)`.
    pub fn split(mut self, n: usize) -> (Self, Self) {
        let tail = self.samples.split_off(n.min(self.samples.len()));
        let classes = self.classes;
        let shape = self.shape.clone();
        (
            self,
            Self {
                samples: tail,
                classes,
                shape,
            },
        )
    }
}

/// Seeded Gaussian blobs in `[0, 1]`.
///
/// Class means are `0.5 + separation / (2√d) · s` for a random sign vector `s`
/// (distinct per class whenever `2^d` allows), noise is `N(0, 0.1²)` per entry,
/// and values are clipped to `[0, 1]`. Sample `i` has label `i mod classes`.
pub fn synthetic_gaussians(
    classes: usize,
    per_class: usize,
    shape: &[usize],
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if classes == 0 {
        return Err(Error::param("classes", "must be positive"));
    }
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::InvalidShape(shape.to_vec()));
    }
    if !(separation > 0.0) || !separation.is_finite() {
        return Err(Error::param("separation", format!("must be positive, got {separation}")));
    }
    let d: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let offset = separation / (2.0 * (d as f64).sqrt());
    let distinct_possible = d >= 64 || (1usize << d) >= classes;

    let mut signs: Vec<Vec<bool>> = Vec::with_capacity(classes);
    while signs.len() < classes {
        let s: Vec<bool> = (0..d).map(|_| rng.random_bool(0.5)).collect();
        if !distinct_possible || !signs.contains(&s) {
            signs.push(s);
        }
    }
    let means: Vec<Vec<f64>> = signs
        .iter()
        .map(|s| s.iter().map(|&b| if b { 0.5 + offset } else { 0.5 - offset }).collect())
        .collect();

    let noise = Normal::new(0.0, 0.1).expect("valid normal");
    let mut samples = Vec::with_capacity(classes * per_class);
    for i in 0..classes * per_class {
        let label = i % classes;
        let data = means[label]
            .iter()
            .map(|&m| (m + noise.sample(&mut rng)).clamp(0.0, 1.0))
            .collect();
        samples.push(Sample {
            x: Tensor::new(shape.to_vec(), data)?,
            label,
        });
    }
    Dataset::new(samples, classes, shape.to_vec())
}

fn idx_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Idx {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<()> {
    if bytes.len() < 4 {
        return Err(idx_err(path, "truncated header"));
    }
    let magic = be_u32(bytes, 0);
    if magic != expected {
        return Err(idx_err(
            path,
            format!("magic number {magic:#010x}, expected {expected:#010x}"),
        ));
    }
    Ok(())
}

/// Parses an IDX image file into `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    check_magic(bytes, IDX_IMAGES_MAGIC, path)?;
    if bytes.len() < 16 {
        return Err(idx_err(path, "truncated header"));
    }
    let count = be_u32(bytes, 4) as usize;
    let rows = be_u32(bytes, 8) as usize;
    let cols = be_u32(bytes, 12) as usize;
    if rows == 0 || cols == 0 {
        return Err(idx_err(path, format!("invalid image size {rows}x{cols}")));
    }
    let expected = count
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .and_then(|v| v.checked_add(16))
        .ok_or_else(|| idx_err(path, "header sizes overflow"))?;
    if bytes.len() != expected {
        return Err(idx_err(
            path,
            format!("file has {} bytes, header implies {expected}", bytes.len()),
        ));
    }
    Ok((count, rows, cols, bytes[16..].to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    check_magic(bytes, IDX_LABELS_MAGIC, path)?;
    if bytes.len() < 8 {
        return Err(idx_err(path, "truncated header"));
    }
    let count = be_u32(bytes, 4) as usize;
    if bytes.len() != 8 + count {
        return Err(idx_err(
            path,
            format!("file has {} bytes, header implies {}", bytes.len(), 8 + count),
        ));
    }
    Ok(bytes[8..].to_vec())
}

/// Builds a dataset from raw IDX bytes. Pixels are scaled by 1/255; mode 0 of
/// each sample is the image row.
pub fn dataset_from_idx(
    images: &[u8],
    labels: &[u8],
    images_path: &Path,
    labels_path: &Path,
) -> Result<Dataset> {
    let (count, rows, cols, pixels) = parse_idx_images(images, images_path)?;
    let labels = parse_idx_labels(labels, labels_path)?;
    if labels.len() != count {
        return Err(idx_err(
            labels_path,
            format!("{} labels for {count} images", labels.len()),
        ));
    }
    let classes = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
    let mut samples = Vec::with_capacity(count);
    for (img, &label) in pixels.chunks_exact(rows * cols).zip(&labels) {
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                data[r + c * rows] = f64::from(img[r * cols + c]) / 255.0;
            }
        }
        samples.push(Sample {
            x: Tensor::new(vec![rows, cols], data)?,
            label: label as usize,
        });
    }
    Dataset::new(samples, classes, vec![rows, cols])
}

pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let images = std::fs::read(ip).map_err(|e| Error::io(ip, e))?;
    let labels = std::fs::read(lp).map_err(|e| Error::io(lp, e))?;
    dataset_from_idx(&images, &labels, ip, lp)
}

/// Encodes row-major `rows × cols` byte images as an IDX image file.
pub fn encode_idx_images(images: &[Vec<u8>], rows: usize, cols: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.len() * rows * cols);
    for v in [IDX_IMAGES_MAGIC, images.len() as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    for img in images {
        assert_eq!(img.len(), rows * cols, "image size");
        out.extend_from_slice(img);
    }
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}
