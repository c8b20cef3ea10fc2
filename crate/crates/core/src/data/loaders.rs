use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{channel_moments, LabeledImageSet};
use crate::error::{Error, Result};
use crate::nets::Normalization;
use crate::tensor::Tensor;

pub const CIFAR10_DIR: &str = "cifar-10-batches-bin";
pub const CIFAR100_DIR: &str = "cifar-100-binary";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "test" => Ok(Split::Val),
            _ => Err(Error::Config(format!("unknown split `{s}` (expected train or val)"))),
        }
    }
}

/// Source of a named labeled dataset.
pub trait DatasetLoader {
    fn name(&self) -> &'static str;
    fn load(&self, split: Split, root: &Path) -> Result<LabeledImageSet>;
}

struct Cifar {
    name: &'static str,
    dir: &'static str,
    classes: usize,
    /// Label bytes preceding each image; the last one is the label used.
    label_bytes: usize,
    train_files: &'static [&'static str],
    val_files: &'static [&'static str],
    normalization: ([f64; 3], [f64; 3]),
}

const CIFAR10: Cifar = Cifar {
    name: "cifar10",
    dir: CIFAR10_DIR,
    classes: 10,
    label_bytes: 1,
    train_files: &["data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin"],
    val_files: &["test_batch.bin"],
    normalization: ([0.4914, 0.4822, 0.4465], [0.2470, 0.2435, 0.2616]),
};

const CIFAR100: Cifar = Cifar {
    name: "cifar100",
    dir: CIFAR100_DIR,
    classes: 100,
    label_bytes: 2,
    train_files: &["train.bin"],
    val_files: &["test.bin"],
    normalization: ([0.5071, 0.4865, 0.4409], [0.2673, 0.2564, 0.2762]),
};

impl DatasetLoader for Cifar {
    fn name(&self) -> &'static str {
        self.name
    }

    fn load(&self, split: Split, root: &Path) -> Result<LabeledImageSet> {
        const PIXELS: usize = 3 * 32 * 32;
        let files = match split {
            Split::Train => self.train_files,
            Split::Val => self.val_files,
        };
        let record = self.label_bytes + PIXELS;
        let mut pixels = Vec::new();
        let mut labels = Vec::new();
        for file in files {
            let path: PathBuf = root.join(self.dir).join(file);
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            if bytes.len() % record != 0 {
                return Err(Error::Corruption(format!("{}: size {} not a multiple of {record}", path.display(), bytes.len())));
            }
            for rec in bytes.chunks_exact(record) {
                let label = rec[self.label_bytes - 1] as usize;
                if label >= self.classes {
                    return Err(Error::Corruption(format!("{}: label {label} out of range", path.display())));
                }
                labels.push(label);
                pixels.extend(rec[self.label_bytes..].iter().map(|&b| b as f32 / 255.0));
            }
        }
        let n = labels.len();
        let images = Tensor::from_vec(&[n, 3, 32, 32], pixels)?;
        let (mean, std) = self.normalization;
        let ds = LabeledImageSet::new(
            self.name,
            images,
            labels,
            self.classes,
            Normalization { mean: mean.to_vec(), std: std.to_vec() },
        )?;
        if split == Split::Train {
            ds.validate(true)?;
        }
        Ok(ds)
    }
}

struct Toy2;

impl DatasetLoader for Toy2 {
    fn name(&self) -> &'static str {
        "toy2"
    }

    fn load(&self, split: Split, _root: &Path) -> Result<LabeledImageSet> {
        Ok(toy2(split))
    }
}

/// Sub-populations of the bundled two-class fixture: one common pattern and
/// four rare ones per class.
const TOY_MODE_WEIGHTS: [usize; 5] = [6, 1, 1, 1, 1];
const TOY_SIDE: usize = 16;

struct Grating {
    freq: f64,
    dir: (f64, f64),
    color: [f64; 3],
}

fn toy_templates() -> Vec<Vec<Grating>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x70f2);
    (0..2)
        .map(|_| {
            (0..TOY_MODE_WEIGHTS.len())
                .map(|_| {
                    let theta = rng.random::<f64>() * PI;
                    let freq = [1.5, 2.5, 3.5][rng.random_range(0..3)];
                    let mut color = [0.0; 3];
                    for c in &mut color {
                        *c = rng.random::<f64>() * 2.0 - 1.0;
                    }
                    let norm = color.iter().map(|c| c * c).sum::<f64>().sqrt().max(1e-6);
                    for c in &mut color {
                        *c /= norm;
                    }
                    Grating { freq, dir: (theta.cos(), theta.sin()), color }
                })
                .collect()
        })
        .collect()
}

/// The bundled 2-class, 3x16x16 fixture. Train has 100 images per class and
/// val 200 per class; both are generated deterministically, classes
/// interleaved (even index = class 0).
pub fn toy2(split: Split) -> LabeledImageSet {
    let (per_class, seed) = match split {
        Split::Train => (100, 1),
        Split::Val => (200, 2),
    };
    let templates = toy_templates();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.08).expect("valid std");
    let total_weight: usize = TOY_MODE_WEIGHTS.iter().sum();
    let schedules: Vec<Vec<usize>> = (0..2)
        .map(|_| {
            let mut modes: Vec<usize> = TOY_MODE_WEIGHTS
                .iter()
                .enumerate()
                .flat_map(|(m, &w)| std::iter::repeat_n(m, per_class * w / total_weight))
                .collect();
            modes.shuffle(&mut rng);
            modes
        })
        .collect();
    let side = TOY_SIDE;
    let mut pixels = Vec::with_capacity(2 * per_class * 3 * side * side);
    let mut labels = Vec::with_capacity(2 * per_class);
    for i in 0..2 * per_class {
        let class = i % 2;
        let mode = schedules[class][i / 2];
        let g = &templates[class][mode];
        let phase = rng.random::<f64>() * 2.0 * PI;
        let amp = 0.12 + 0.13 * rng.random::<f64>();
        let offset = 0.1 * (rng.random::<f64>() - 0.5);
        for ch in 0..3 {
            for y in 0..side {
                for x in 0..side {
                    let t = (x as f64 * g.dir.0 + y as f64 * g.dir.1) / side as f64;
                    let wave = (2.0 * PI * g.freq * t + phase).sin();
                    let v = 0.5 + offset + amp * g.color[ch] * wave + noise.sample(&mut rng);
                    pixels.push(v.clamp(0.0, 1.0) as f32);
                }
            }
        }
        labels.push(class);
    }
    let images = Tensor::from_vec(&[2 * per_class, 3, side, side], pixels).expect("fixture shape");
    let normalization = channel_moments(&images);
    LabeledImageSet { name: "toy2".into(), images, labels, class_count: 2, normalization }
}

fn registry() -> Vec<Box<dyn DatasetLoader>> {
    vec![Box::new(CIFAR10), Box::new(CIFAR100), Box::new(Toy2)]
}

/// Loads a named dataset split from `root`. Ordering is file order, then
/// record order within each file.
pub fn load_dataset(name: &str, split: Split, root: &Path) -> Result<LabeledImageSet> {
    let loaders = registry();
    let loader = loaders.iter().find(|l| l.name() == name).ok_or_else(|| {
        let known: Vec<_> = loaders.iter().map(|l| l.name()).collect();
        Error::Config(format!("unknown dataset `{name}` (known: {})", known.join(", ")))
    })?;
    loader.load(split, root)
}
