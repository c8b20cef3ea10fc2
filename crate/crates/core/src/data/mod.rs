//! Labeled image sets, the bundled fixture, and the synthetic dataset format.

mod loaders;
mod synthetic;

pub use loaders::{load_dataset, toy2, DatasetLoader, Split, CIFAR10_DIR, CIFAR100_DIR};
pub use synthetic::{load_synthetic, save_synthetic, SyntheticDataset, SyntheticRecord, SYNTHETIC_VERSION};

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nets::Normalization;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Original images in raw `[0,1]` pixel range with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImageSet {
    pub name: String,
    /// `N x C x H x W`
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub normalization: Normalization,
}

impl LabeledImageSet {
    pub fn new(
        name: impl Into<String>,
        images: Tensor<f32>,
        labels: Vec<usize>,
        class_count: usize,
        normalization: Normalization,
    ) -> Result<Self> {
        let ds = LabeledImageSet { name: name.into(), images, labels, class_count, normalization };
        ds.validate(false)?;
        Ok(ds)
    }

    /// Checks shape, label range and pixel range. `require_all_classes`
    /// additionally demands every class be present (training splits).
    pub fn validate(&self, require_all_classes: bool) -> Result<()> {
        if self.images.shape().len() != 4 {
            return Err(Error::Validation(format!("images must be N x C x H x W, got {:?}", self.images.shape())));
        }
        if self.images.dim(0) != self.labels.len() {
            return Err(Error::Validation(format!(
                "{} images but {} labels",
                self.images.dim(0),
                self.labels.len()
            )));
        }
        if self.class_count == 0 {
            return Err(Error::Validation("class_count must be positive".into()));
        }
        if let Some((i, &l)) = self.labels.iter().enumerate().find(|(_, &l)| l >= self.class_count) {
            return Err(Error::Corruption(format!("label {l} at index {i} outside [0, {})", self.class_count)));
        }
        if self.images.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Validation("pixel values must lie in [0, 1]".into()));
        }
        if self.normalization.mean.len() != self.images.dim(1) {
            return Err(Error::Validation("normalization channel count differs from images".into()));
        }
        if require_all_classes {
            class_indices(self)?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Batch of the given samples converted to the compute scalar.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> Tensor<T> {
        self.images.select(indices).cast()
    }

    pub fn labels_of(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    /// New set restricted to `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> LabeledImageSet {
        LabeledImageSet {
            name: self.name.clone(),
            images: self.images.select(indices),
            labels: self.labels_of(indices),
            class_count: self.class_count,
            normalization: self.normalization.clone(),
        }
    }

    /// Uniformly samples `per_class` images of each class (seeded), keeping
    /// index order within the result.
    pub fn subsample_per_class(&self, per_class: usize, seed: u64) -> Result<LabeledImageSet> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut keep = Vec::new();
        for (class, mut idx) in class_indices(self)? {
            if idx.len() < per_class {
                return Err(Error::InsufficientData { class, needed: per_class, available: idx.len() });
            }
            idx.shuffle(&mut rng);
            keep.extend_from_slice(&idx[..per_class]);
        }
        keep.sort_unstable();
        Ok(self.subset(&keep))
    }

    /// Keeps only samples whose label is in `classes`.
    pub fn filter_classes(&self, classes: &[usize]) -> LabeledImageSet {
        let keep: Vec<usize> = (0..self.len()).filter(|&i| classes.contains(&self.labels[i])).collect();
        self.subset(&keep)
    }
}

/// Sorted sample indices of every class. Fails if a class has no samples.
pub fn class_indices(ds: &LabeledImageSet) -> Result<BTreeMap<usize, Vec<usize>>> {
    let mut map: BTreeMap<usize, Vec<usize>> = (0..ds.class_count).map(|c| (c, Vec::new())).collect();
    for (i, &l) in ds.labels.iter().enumerate() {
        map.get_mut(&l)
            .ok_or_else(|| Error::Corruption(format!("label {l} outside [0, {})", ds.class_count)))?
            .push(i);
    }
    if let Some((c, _)) = map.iter().find(|(_, v)| v.is_empty()) {
        return Err(Error::Validation(format!("class {c} has no samples")));
    }
    Ok(map)
}

/// Per-channel mean and std of raw pixels.
pub fn channel_moments(images: &Tensor<f32>) -> Normalization {
    let s = images.shape();
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let mut mean = vec![0.0; c];
    let mut std = vec![0.0; c];
    for ch in 0..c {
        let mut sum = 0.0f64;
        let mut sq = 0.0f64;
        for i in 0..n {
            for &v in &images.sample(i)[ch * hw..(ch + 1) * hw] {
                sum += v as f64;
                sq += (v as f64) * (v as f64);
            }
        }
        let m = (n * hw) as f64;
        mean[ch] = sum / m;
        std[ch] = (sq / m - mean[ch] * mean[ch]).max(1e-12).sqrt();
    }
    Normalization { mean, std }
}
