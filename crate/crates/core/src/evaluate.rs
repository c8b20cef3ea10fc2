//! Downstream measurement on synthetic data: multi-seed evaluation, the
//! random-real baseline, class-incremental evaluation and feature export.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::curriculum::{CurriculumPlan, Schedule};
use crate::data::{class_indices, LabeledImageSet, SyntheticDataset, SyntheticRecord};
use crate::error::{Error, Result};
use crate::io::{f32_blob, sha256_hex, write_json, JsonLines};
use crate::nets::Model;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::{evaluate_model, predict, train_student_on, TrainConfig};

/// Results-file entry for one architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub dataset: String,
    pub ipc: usize,
    pub arch: String,
    pub seeds: Vec<u64>,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    /// Hash of the training config with `rng_seed` cleared.
    pub config_hash: String,
}

/// Sample mean and standard deviation (`n - 1` denominator; 0 for one value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

pub fn config_hash(cfg: &TrainConfig) -> String {
    let canonical = TrainConfig { rng_seed: 0, ..cfg.clone() };
    sha256_hex(serde_json::to_string(&canonical).expect("config serializes").as_bytes())
}

/// Seeds of the `n` evaluation runs.
pub fn eval_seeds(cfg: &TrainConfig, n: usize) -> Vec<u64> {
    (0..n as u64).map(|k| cfg.rng_seed.wrapping_add(k)).collect()
}

fn check_classes<T: Scalar>(sds: &SyntheticDataset, teacher: &Model<T>, val: &LabeledImageSet) -> Result<()> {
    if sds.class_count != val.class_count || teacher.class_count() != val.class_count {
        return Err(Error::Config(format!(
            "class counts differ: synthetic {}, teacher {}, validation {}",
            sds.class_count,
            teacher.class_count(),
            val.class_count
        )));
    }
    if sds.image_shape != val.image_shape() {
        return Err(Error::Config("synthetic and validation image shapes differ".into()));
    }
    Ok(())
}

/// Trains a fresh network per `(arch, seed)` on `sds` (relabeled by the
/// teacher in soft mode) and reports validation accuracy statistics.
pub fn evaluate_synthetic<T: Scalar>(
    sds: &SyntheticDataset,
    teacher: &Model<T>,
    arch_ids: &[&str],
    val: &LabeledImageSet,
    cfg: &TrainConfig,
    n_seeds: usize,
    metrics: &mut JsonLines,
) -> Result<Vec<EvalResult>> {
    check_classes(sds, teacher, val)?;
    if n_seeds == 0 {
        return Err(Error::Config("n_seeds must be at least 1".into()));
    }
    let seeds = eval_seeds(cfg, n_seeds);
    let mut out = Vec::with_capacity(arch_ids.len());
    for &arch in arch_ids {
        let mut accuracies = Vec::with_capacity(n_seeds);
        for &seed in &seeds {
            let run_cfg = TrainConfig { rng_seed: seed, ..cfg.clone() };
            let stage = format!("eval_{arch}_seed{seed}");
            let model = train_student_on(&sds.records, teacher, None, arch, &run_cfg, &stage, None, metrics)?;
            let acc = evaluate_model(&model, val)?;
            metrics.write(&serde_json::json!({ "stage": stage, "split": "val", "accuracy": acc }))?;
            accuracies.push(acc);
        }
        let (mean, std) = mean_std(&accuracies);
        out.push(EvalResult {
            dataset: sds.dataset_id.clone(),
            ipc: sds.ipc,
            arch: arch.to_string(),
            seeds: seeds.clone(),
            accuracies,
            mean,
            std,
            config_hash: config_hash(cfg),
        });
    }
    metrics.flush()?;
    Ok(out)
}

/// `ipc` real images per class drawn uniformly without replacement, in the
/// synthetic format.
pub fn random_real_baseline(ds: &LabeledImageSet, ipc: usize, rng_seed: u64) -> Result<SyntheticDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut records = Vec::with_capacity(ipc * ds.class_count);
    for (class, mut idx) in class_indices(ds)? {
        if idx.len() < ipc {
            return Err(Error::InsufficientData { class, needed: ipc, available: idx.len() });
        }
        idx.shuffle(&mut rng);
        for &i in &idx[..ipc] {
            records.push(SyntheticRecord { image: ds.images.sample(i).to_vec(), label: class, seed_index: Some(i), curriculum_index: 1 });
        }
    }
    let sds = SyntheticDataset {
        dataset_id: ds.name.clone(),
        ipc,
        class_count: ds.class_count,
        image_shape: ds.image_shape(),
        curricula: CurriculumPlan::from_cumulative(ipc, vec![ipc], Schedule::Custom)?,
        records,
        soft_labels: None,
    };
    sds.validate()?;
    Ok(sds)
}

/// Class-incremental protocol: classes are split into `n_steps` seeded
/// groups; at step `t` a fresh network trains on the synthetic records of
/// all classes seen so far and is tested on their validation images, with
/// predictions restricted to the seen classes.
#[allow(clippy::too_many_arguments)]
pub fn continual_eval<T: Scalar>(
    sds: &SyntheticDataset,
    teacher: &Model<T>,
    val: &LabeledImageSet,
    arch_id: &str,
    n_steps: usize,
    cfg: &TrainConfig,
    partition_seed: u64,
    metrics: &mut JsonLines,
) -> Result<Vec<f64>> {
    check_classes(sds, teacher, val)?;
    let c = sds.class_count;
    if n_steps == 0 || !c.is_multiple_of(n_steps) {
        return Err(Error::Config(format!("{c} classes cannot be split into {n_steps} equal steps")));
    }
    let groups = class_partition(c, n_steps, partition_seed);
    let mut seen: Vec<usize> = Vec::new();
    let mut out = Vec::with_capacity(n_steps);
    for (t, group) in groups.iter().enumerate() {
        seen.extend(group);
        seen.sort_unstable();
        let records: Vec<SyntheticRecord> = sds.records.iter().filter(|r| seen.contains(&r.label)).cloned().collect();
        let restrict = (seen.len() < c).then_some(seen.as_slice());
        let stage = format!("continual_step{}", t + 1);
        let model = train_student_on(&records, teacher, None, arch_id, cfg, &stage, restrict, metrics)?;
        let test = val.filter_classes(&seen);
        let pred = predict(&model, &test, restrict)?;
        let acc = if test.is_empty() {
            0.0
        } else {
            pred.iter().zip(&test.labels).filter(|(p, y)| p == y).count() as f64 / test.len() as f64
        };
        metrics.write(&serde_json::json!({ "stage": stage, "split": "val", "accuracy": acc, "classes": seen }))?;
        out.push(acc);
    }
    metrics.flush()?;
    Ok(out)
}

/// Seeded split of `0..c` into `n_steps` equal groups.
pub fn class_partition(c: usize, n_steps: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut classes: Vec<usize> = (0..c).collect();
    classes.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    classes.chunks(c / n_steps).map(|g| g.to_vec()).collect()
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FeatureSidecar {
    pub rows: usize,
    pub dim: usize,
    pub layer: String,
    pub features_file: String,
    pub labels: Vec<usize>,
}

/// Penultimate features of `images` (eval mode) as `features.bin`
/// (row-major little-endian `f32`, `rows x dim`) plus `labels.json`.
pub fn export_features<T: Scalar>(model: &Model<T>, images: &Tensor<f32>, labels: &[usize], dir: &Path) -> Result<(PathBuf, PathBuf)> {
    if images.dim(0) != labels.len() {
        return Err(Error::Shape(format!("{} images but {} labels", images.dim(0), labels.len())));
    }
    let n = labels.len();
    let dim = model.feature_dim();
    let mut values = Vec::with_capacity(n * dim);
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(256) {
        let f = model.features(&images.select(chunk).cast::<T>())?;
        values.extend(f.data().iter().map(|v| v.as_f64() as f32));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let features = dir.join("features.bin");
    fs::write(&features, f32_blob(&values)).map_err(|e| Error::io(&features, e))?;
    let sidecar = dir.join("labels.json");
    let meta = FeatureSidecar { rows: n, dim, layer: "penultimate".into(), features_file: "features.bin".into(), labels: labels.to_vec() };
    write_json(&sidecar, &meta)?;
    Ok((features, sidecar))
}
