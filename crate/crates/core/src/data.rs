//! Dataset ingestion: MNIST-style IDX files and seeded Gaussian mixtures.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::nn::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[n, ...sample shape]`
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(features: Tensor, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        if features.batch() != labels.len() {
            return Err(Error::Dataset(format!(
                "{} samples but {} labels",
                features.batch(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Dataset(format!(
                "label {bad} out of range for {classes} classes"
            )));
        }
        if !features.is_finite() {
            return Err(Error::Dataset("non-finite feature value".into()));
        }
        Ok(Self {
            features,
            labels,
            classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.features.shape()[1..]
    }

    /// Gathers the given samples into one batch tensor.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let n = self.features.sample_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.features.sample(i));
            labels.push(self.labels[i]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(self.sample_shape());
        (
            Tensor::new(shape, data).expect("gathered batch matches its shape"),
            labels,
        )
    }

    /// Keeps the first `limit` samples.
    pub fn truncate(mut self, limit: usize) -> Self {
        if limit < self.len() {
            let n = self.features.sample_len();
            let mut shape = self.features.shape().to_vec();
            shape[0] = limit;
            let mut data = self.features.into_data();
            data.truncate(limit * n);
            self.features = Tensor::new(shape, data).expect("truncated tensor");
            self.labels.truncate(limit);
        }
        self
    }

    /// Per-feature mean over this dataset.
    pub fn feature_means(&self) -> Vec<f32> {
        let n = self.features.sample_len();
        let mut sums = vec![0.0f64; n];
        for b in 0..self.len() {
            for (s, &v) in sums.iter_mut().zip(self.features.sample(b)) {
                *s += v as f64;
            }
        }
        sums.iter()
            .map(|s| (s / self.len() as f64) as f32)
            .collect()
    }

    pub fn subtract(&mut self, means: &[f32]) {
        let n = means.len();
        for sample in self.features.data_mut().chunks_exact_mut(n) {
            for (v, m) in sample.iter_mut().zip(means) {
                *v -= m;
            }
        }
    }

    /// FNV-1a over feature bits and labels.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for v in self.features.data() {
            eat(&v.to_bits().to_le_bytes());
        }
        for &l in &self.labels {
            eat(&(l as u32).to_le_bytes());
        }
        h
    }
}

struct BeReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl BeReader<'_> {
    fn u32(&mut self) -> Result<u32> {
        let chunk = self
            .bytes
            .get(self.pos..self.pos + 4)
            .ok_or(Error::UnexpectedEnd(self.bytes.len()))?;
        self.pos += 4;
        Ok(u32::from_be_bytes(chunk.try_into().expect("4 bytes")))
    }

    fn rest(&self, n: usize) -> Result<&[u8]> {
        self.bytes
            .get(self.pos..self.pos + n)
            .ok_or(Error::UnexpectedEnd(self.bytes.len()))
    }
}

/// Parses an IDX image file: magic `0x00000803`, count, rows, cols, pixels.
/// Returns `(count, rows, cols, pixels scaled to [0, 1])`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<f32>)> {
    let mut r = BeReader { bytes, pos: 0 };
    let magic = r.u32()?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic {
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let count = r.u32()? as usize;
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let pixels = r.rest(count * rows * cols)?;
    Ok((
        count,
        rows,
        cols,
        pixels.iter().map(|&p| p as f32 / 255.0).collect(),
    ))
}

/// Parses an IDX label file: magic `0x00000801`, count, labels.
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let mut r = BeReader { bytes, pos: 0 };
    let magic = r.u32()?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic {
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let count = r.u32()? as usize;
    Ok(r.rest(count)?.iter().map(|&l| l as usize).collect())
}

/// Loads an image/label IDX pair as `[n, 1, rows, cols]` with 10 classes.
pub fn load_idx(images: &Path, labels: &Path, split: Split) -> Result<Dataset> {
    let image_bytes = std::fs::read(images).map_err(|e| Error::io(images, e))?;
    let label_bytes = std::fs::read(labels).map_err(|e| Error::io(labels, e))?;
    idx_dataset(&image_bytes, &label_bytes, split)
}

pub fn idx_dataset(image_bytes: &[u8], label_bytes: &[u8], split: Split) -> Result<Dataset> {
    let (count, rows, cols, pixels) = parse_idx_images(image_bytes)?;
    let labels = parse_idx_labels(label_bytes)?;
    if labels.len() != count {
        return Err(Error::Dataset(format!(
            "count mismatch: {count} images but {} labels",
            labels.len()
        )));
    }
    let classes = labels.iter().max().map_or(10, |&m| (m + 1).max(10));
    Dataset::new(
        Tensor::new(vec![count, 1, rows, cols], pixels)?,
        labels,
        classes,
        split,
    )
}

/// The standard MNIST file pair of `split` inside `dir`.
pub fn load_mnist(dir: &Path, split: Split) -> Result<Dataset> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    load_idx(
        &dir.join(format!("{prefix}-images-idx3-ubyte")),
        &dir.join(format!("{prefix}-labels-idx1-ubyte")),
        split,
    )
}

/// Seeded mixture of unit-variance Gaussians. Class `c` is centred at
/// `separation · e_c` (the `c`-th axis), so `separation` is the distance of
/// every class mean from the origin in units of σ. Sample `i` belongs to
/// class `i mod num_classes`.
pub fn synth_gaussians(
    num_classes: usize,
    dim: usize,
    n: usize,
    separation: f32,
    seed: u64,
) -> Result<Dataset> {
    if num_classes < 2 || dim < num_classes || n < num_classes {
        return Err(Error::Dataset(format!(
            "gaussian mixture needs 2 <= classes <= dim and n >= classes (classes={num_classes}, dim={dim}, n={n})"
        )));
    }
    if !separation.is_finite() || separation < 0.0 {
        return Err(Error::Dataset(format!("separation {separation}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % num_classes;
        for d in 0..dim {
            let noise: f32 = StandardNormal.sample(&mut rng);
            data.push(if d == class {
                separation + noise
            } else {
                noise
            });
        }
        labels.push(class);
    }
    Dataset::new(
        Tensor::new(vec![n, dim], data)?,
        labels,
        num_classes,
        Split::Train,
    )
}

/// Splits a generated set into disjoint train (first `n_train`) and test parts.
pub fn split_train_test(all: Dataset, n_train: usize) -> Result<(Dataset, Dataset)> {
    if n_train == 0 || n_train >= all.len() {
        return Err(Error::Dataset(format!(
            "cannot split {} samples at {n_train}",
            all.len()
        )));
    }
    let n = all.features.sample_len();
    let sample_shape = all.sample_shape().to_vec();
    let data = all.features.into_data();
    let (train_data, test_data) = data.split_at(n_train * n);
    let (train_labels, test_labels) = all.labels.split_at(n_train);
    let shape = |count: usize| {
        let mut s = vec![count];
        s.extend_from_slice(&sample_shape);
        s
    };
    Ok((
        Dataset::new(
            Tensor::new(shape(n_train), train_data.to_vec())?,
            train_labels.to_vec(),
            all.classes,
            Split::Train,
        )?,
        Dataset::new(
            Tensor::new(shape(test_labels.len()), test_data.to_vec())?,
            test_labels.to_vec(),
            all.classes,
            Split::Test,
        )?,
    ))
}
