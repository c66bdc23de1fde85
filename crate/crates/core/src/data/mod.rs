//! Datasets, synthetic generation, non-IID partitioning and preprocessing.

mod idx;
pub(crate) mod partition;

pub use idx::{load_idx, read_idx_images, read_idx_labels, write_idx_images, write_idx_labels, IdxImages};
pub use partition::{dirichlet_partition, subsample, PartitionSpec};

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::Batch;
use crate::rng;

/// Labelled inputs: row `i` of `x` carries class `labels[i] < classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(x: Matrix, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if x.rows() != labels.len() {
            return Err(Error::shape("Dataset::new", x.rows(), labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} outside [0, {classes})"
            )));
        }
        Ok(Self { x, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    /// First `n` rows and the remainder.
    pub fn split_at(&self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.len());
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.len()).collect();
        (self.subset(&head), self.subset(&tail))
    }

    pub fn one_hot(&self) -> Matrix {
        one_hot(&self.labels, self.classes)
    }

    /// Inputs with one-hot targets.
    pub fn to_batch(&self) -> Batch {
        Batch {
            x: self.x.clone(),
            y: self.one_hot(),
        }
    }

    pub fn class_histogram(&self, idx: &[usize]) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        for &i in idx {
            h[self.labels[i]] += 1;
        }
        h
    }
}

/// `{0,1}`-valued one-hot encoding, `labels.len() x classes`.
pub fn one_hot(labels: &[usize], classes: usize) -> Matrix {
    let mut y = Matrix::zeros(labels.len(), classes);
    for (i, &l) in labels.iter().enumerate() {
        y[(i, l)] = 1.0;
    }
    y
}

/// Class-conditional Gaussian blobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub samples: usize,
    pub dim: usize,
    pub classes: usize,
    /// Standard deviation of the class means (per coordinate).
    #[serde(default = "SyntheticSpec::default_separation")]
    pub separation: f64,
    /// Standard deviation of the within-class noise (per coordinate).
    #[serde(default = "SyntheticSpec::default_noise")]
    pub noise: f64,
}

impl SyntheticSpec {
    fn default_separation() -> f64 {
        1.0
    }

    fn default_noise() -> f64 {
        1.0
    }

    pub fn new(samples: usize, dim: usize, classes: usize) -> Self {
        Self {
            samples,
            dim,
            classes,
            separation: Self::default_separation(),
            noise: Self::default_noise(),
        }
    }

    /// Labels cycle through the classes and are then shuffled, so every class
    /// appears at least `⌊N/C⌋` times. Inputs are scaled by `1/√dim`.
    pub fn generate(&self, seed: u64) -> Result<Dataset> {
        if self.classes == 0 || self.samples < self.classes {
            return Err(Error::InvalidArgument(format!(
                "synthetic data needs at least one sample per class (N={}, C={})",
                self.samples, self.classes
            )));
        }
        if self.dim == 0 {
            return Err(Error::InvalidArgument("synthetic dim must be >= 1".into()));
        }
        let mut means_rng = rng::stream_for(seed, crate::labels!["synthetic", "means"]);
        let means = Matrix::from_fn(self.classes, self.dim, |_, _| {
            {
            let z: f64 = StandardNormal.sample(&mut means_rng);
            self.separation * z
        }
        });
        let mut labels: Vec<usize> = (0..self.samples).map(|i| i % self.classes).collect();
        let mut sample_rng = rng::stream_for(seed, crate::labels!["synthetic", "samples"]);
        labels.shuffle(&mut sample_rng);
        let scale = 1.0 / (self.dim as f64).sqrt();
        let mut x = Matrix::zeros(self.samples, self.dim);
        for (i, &l) in labels.iter().enumerate() {
            for (k, v) in x.row_mut(i).iter_mut().enumerate() {
                let z: f64 = StandardNormal.sample(&mut sample_rng);
                *v = scale * (means[(l, k)] + self.noise * z);
            }
        }
        Dataset::new(x, labels, self.classes)
    }
}

/// Gaussian-blob dataset with default separation and noise.
pub fn make_synthetic(samples: usize, dim: usize, classes: usize, seed: u64) -> Result<Dataset> {
    SyntheticSpec::new(samples, dim, classes).generate(seed)
}

/// Rescales every row to unit ℓ2 norm.
pub fn unit_normalize(ds: &Dataset) -> Result<Dataset> {
    let mut out = ds.clone();
    for i in 0..out.x.rows() {
        let row = out.x.row_mut(i);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "row {i} has zero or non-finite norm"
            )));
        }
        row.iter_mut().for_each(|v| *v /= norm);
    }
    Ok(out)
}

/// 2x2 average pooling of square images stored row-major in each row.
pub fn pool2x2(ds: &Dataset, side: usize) -> Result<Dataset> {
    if side * side != ds.dim() || !side.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "cannot pool {}-dim rows as {side}x{side} images",
            ds.dim()
        )));
    }
    let half = side / 2;
    let mut x = Matrix::zeros(ds.len(), half * half);
    for i in 0..ds.len() {
        let src = ds.x.row(i);
        let dst = x.row_mut(i);
        for r in 0..half {
            for c in 0..half {
                let at = |rr: usize, cc: usize| src[rr * side + cc];
                dst[r * half + c] = 0.25
                    * (at(2 * r, 2 * c)
                        + at(2 * r, 2 * c + 1)
                        + at(2 * r + 1, 2 * c)
                        + at(2 * r + 1, 2 * c + 1));
            }
        }
    }
    Dataset::new(x, ds.labels.clone(), ds.classes)
}
