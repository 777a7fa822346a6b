//! Dataset ingestion: CIFAR-10 binary records and seeded synthetic blobs.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::backbone::layer_seed;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor4};

pub const CIFAR10_SIDE: usize = 32;
pub const CIFAR10_CLASSES: usize = 10;
/// One label byte followed by three 32×32 planes.
pub const CIFAR10_RECORD: usize = 1 + 3 * CIFAR10_SIDE * CIFAR10_SIDE;
pub const SYNTHETIC_SHAPE: [usize; 3] = [3, 16, 16];

/// Per-channel affine normalization applied after scaling bytes to [0, 1].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Normalization {
    pub const IDENTITY: Normalization = Normalization { mean: [0.0; 3], std: [1.0; 3] };

    pub fn validate(&self) -> Result<()> {
        if self.std.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Config(format!("normalization std {:?} must be positive", self.std)));
        }
        Ok(())
    }
}

impl Default for Normalization {
    fn default() -> Self {
        Self::IDENTITY
    }
}

/// Images stored contiguously as (N, C, H, W) with one label per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    pub sample_shape: [usize; 3],
    pub images: Vec<T>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub normalization: Normalization,
}

impl<T: Scalar> Dataset<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn sample_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    pub fn image(&self, i: usize) -> &[T] {
        let s = self.sample_len();
        &self.images[i * s..(i + 1) * s]
    }

    /// Gathers the samples at `indices` into one batch tensor.
    pub fn batch(&self, indices: &[usize]) -> (Tensor4<T>, Vec<usize>) {
        let [c, h, w] = self.sample_shape;
        let mut data = Vec::with_capacity(indices.len() * self.sample_len());
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        let t = Tensor4::from_vec(Shape::new(indices.len(), c, h, w), data).expect("batch shape matches");
        (t, indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// Samples with index ≥ `at` move to the returned set.
    pub fn split_off(&mut self, at: usize) -> Dataset<T> {
        let at = at.min(self.len());
        Dataset {
            sample_shape: self.sample_shape,
            images: self.images.split_off(at * self.sample_len()),
            labels: self.labels.split_off(at),
            num_classes: self.num_classes,
            normalization: self.normalization,
        }
    }
}

/// Parses CIFAR-10 binary records; record order is preserved.
pub fn parse_cifar10<T: Scalar>(bytes: &[u8], norm: Normalization) -> Result<Dataset<T>> {
    norm.validate()?;
    if bytes.len() % CIFAR10_RECORD != 0 {
        let whole = bytes.len() / CIFAR10_RECORD * CIFAR10_RECORD;
        return Err(Error::Format {
            offset: whole as u64,
            message: format!(
                "truncated record: {} trailing bytes, records are {CIFAR10_RECORD} bytes",
                bytes.len() - whole
            ),
        });
    }
    let plane = CIFAR10_SIDE * CIFAR10_SIDE;
    let n = bytes.len() / CIFAR10_RECORD;
    let mut images = Vec::with_capacity(n * 3 * plane);
    let mut labels = Vec::with_capacity(n);
    for (r, rec) in bytes.chunks_exact(CIFAR10_RECORD).enumerate() {
        let label = rec[0] as usize;
        if label >= CIFAR10_CLASSES {
            return Err(Error::Format {
                offset: (r * CIFAR10_RECORD) as u64,
                message: format!("label {label} out of range 0..=9"),
            });
        }
        labels.push(label);
        for (c, px) in rec[1..].chunks_exact(plane).enumerate() {
            let (m, s) = (norm.mean[c], norm.std[c]);
            images.extend(px.iter().map(|&b| T::lit((b as f64 / 255.0 - m) / s)));
        }
    }
    Ok(Dataset {
        sample_shape: [3, CIFAR10_SIDE, CIFAR10_SIDE],
        images,
        labels,
        num_classes: CIFAR10_CLASSES,
        normalization: norm,
    })
}

pub fn load_cifar10<T: Scalar>(path: &Path, norm: Normalization) -> Result<Dataset<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_cifar10(&bytes, norm)
}

/// Class-conditional blobs at 3×16×16: a seeded per-class texture with one
/// brightened colour channel, plus Gaussian noise of standard deviation
/// `noise`, clamped to [0, 1]. Sample `i` has label `i % classes`.
pub fn gen_synthetic<T: Scalar>(classes: usize, n: usize, seed: u64, noise: f64) -> Result<Dataset<T>> {
    if classes == 0 {
        return Err(Error::Config("synthetic data needs at least one class".into()));
    }
    if !(noise >= 0.0) || !noise.is_finite() {
        return Err(Error::Config(format!("noise {noise} must be a finite non-negative number")));
    }
    let [c, h, w] = SYNTHETIC_SHAPE;
    let len = c * h * w;
    let texture = Uniform::new(0.1, 0.6).expect("valid range");
    let patterns: Vec<Vec<f64>> = (0..classes)
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(layer_seed(seed, &format!("class{k}")));
            (0..len)
                .map(|i| texture.sample(&mut rng) + if i / (h * w) == k % c { 0.35 } else { 0.0 })
                .collect()
        })
        .collect();
    let gauss = Normal::new(0.0, noise).expect("valid std");
    let mut rng = ChaCha8Rng::seed_from_u64(layer_seed(seed, "noise"));
    let mut images = Vec::with_capacity(n * len);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % classes;
        labels.push(k);
        for &p in &patterns[k] {
            let eps = if noise > 0.0 { gauss.sample(&mut rng) } else { 0.0 };
            images.push(T::lit((p + eps).clamp(0.0, 1.0)));
        }
    }
    Ok(Dataset { sample_shape: SYNTHETIC_SHAPE, images, labels, num_classes: classes, normalization: Normalization::IDENTITY })
}
