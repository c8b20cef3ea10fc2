//! Supervised trainer for teachers, curriculum students and evaluation networks.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_batch, sample_view, AugmentConfig, View};
use crate::batching::epoch_batches;
use crate::data::{LabeledImageSet, SyntheticRecord};
use crate::error::{Error, Result};
use crate::io::JsonLines;
use crate::nets::{log_softmax, softmax_probs, Backprop, BnMode, Model};
use crate::optim::{cosine_lr, LrSchedule, Optimizer, OptimizerKind};
use crate::recover::cross_entropy;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const EVAL_BATCH: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelMode {
    Hard,
    /// Teacher softmax on each augmented view.
    Soft,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "crate::config::TrainFile", try_from = "crate::config::TrainFile")]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub lr_schedule: LrSchedule,
    pub epochs: usize,
    pub batch_size: usize,
    pub augmentation: AugmentConfig,
    pub label_mode: LabelMode,
    pub rng_seed: u64,
    pub bn_momentum: f64,
    /// Keep the full epoch count when warm-starting instead of halving it.
    pub warm_start_full_epochs: bool,
}

impl Default for TrainConfig {
    /// CIFAR-10 evaluation recipe.
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerKind::AdamW { beta1: 0.9, beta2: 0.999 },
            learning_rate: 1e-3,
            weight_decay: 1e-2,
            lr_schedule: LrSchedule::Cosine,
            epochs: 1000,
            batch_size: 16,
            augmentation: AugmentConfig::default(),
            label_mode: LabelMode::Soft,
            rng_seed: 0,
            bn_momentum: 0.1,
            warm_start_full_epochs: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch_size must be at least 2, got {}", self.batch_size)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::Config("bn_momentum must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Epochs actually run, given whether the model is warm-started.
    pub fn effective_epochs(&self, warm_start: bool) -> usize {
        if warm_start && !self.warm_start_full_epochs {
            self.epochs.div_ceil(2)
        } else {
            self.epochs
        }
    }
}

/// One metrics-stream line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub stage: String,
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

/// Mean cross-entropy against soft targets and its logit gradient.
pub fn soft_cross_entropy<T: Scalar>(logits: &Tensor<T>, targets: &Tensor<T>) -> (T, Tensor<T>) {
    let n = logits.dim(0);
    let inv_n = T::one() / T::of(n as f64);
    let logp = log_softmax(logits);
    let mut loss = T::zero();
    let mut grad = logp.map(|v| v.exp() * inv_n);
    for ((g, &lp), &q) in grad.data_mut().iter_mut().zip(logp.data()).zip(targets.data()) {
        loss -= q * lp;
        *g -= q * inv_n;
    }
    (loss * inv_n, grad)
}

struct Fit<'a, T> {
    images: &'a Tensor<f32>,
    labels: &'a [usize],
    teacher: Option<&'a Model<T>>,
    val: Option<&'a LabeledImageSet>,
    /// Soft targets are renormalized over these classes.
    classes: Option<&'a [usize]>,
    stage: &'a str,
    epochs: usize,
}

fn fit<T: Scalar>(model: &mut Model<T>, job: Fit<'_, T>, cfg: &TrainConfig, metrics: &mut JsonLines) -> Result<()> {
    let n = job.labels.len();
    if n < 2 {
        return Err(Error::Config(format!("{}: need at least 2 training images, got {n}", job.stage)));
    }
    let [_, _, h, w] = [job.images.dim(0), job.images.dim(1), job.images.dim(2), job.images.dim(3)];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut opt = Optimizer::<T>::new(cfg.optimizer, cfg.weight_decay);
    let steps_per_epoch = epoch_batches(n, cfg.batch_size, &mut ChaCha8Rng::seed_from_u64(0)).len();
    let total = steps_per_epoch * job.epochs;
    let momentum = T::of(cfg.bn_momentum);
    let mut grads = model.zero_grads();
    let mut step = 0;
    let start = Instant::now();
    for epoch in 0..job.epochs {
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        let mut lr = cfg.learning_rate;
        for batch in epoch_batches(n, cfg.batch_size, &mut rng) {
            lr = cosine_lr(cfg.learning_rate, step, total);
            let views: Vec<View> = if cfg.augmentation.is_identity() {
                vec![View::identity(h, w); batch.len()]
            } else {
                batch.iter().map(|_| sample_view(&mut rng, h, w, &cfg.augmentation)).collect()
            };
            let x: Tensor<T> = augment_batch(&job.images.select(&batch).cast(), &views);
            let labels: Vec<usize> = batch.iter().map(|&i| job.labels[i]).collect();
            let trace = model.forward_trace(&x, BnMode::Train)?;
            let (loss, dlogits) = match (cfg.label_mode, job.teacher) {
                (LabelMode::Soft, Some(t)) => {
                    let mut q = softmax_probs(&t.forward(&x, BnMode::Eval)?)?;
                    if let Some(classes) = job.classes {
                        restrict_targets(&mut q, classes);
                    }
                    soft_cross_entropy(&trace.logits, &q)
                }
                _ => cross_entropy(&trace.logits, &labels),
            };
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("{} loss diverged at epoch {epoch}, step {step}", job.stage)));
            }
            grads.zero();
            let seeds = Backprop { logits: Some(&dlogits), features: None, stats: None };
            model.backward(&trace, seeds, Some(&mut grads), false);
            if !grads.all_finite() {
                return Err(Error::NonFinite(format!("{} gradient diverged at epoch {epoch}, step {step}", job.stage)));
            }
            model.absorb_batch_stats(&trace.batch_stats().expect("train mode records stats"), momentum);
            model.visit_params_mut(&mut |slot, p| opt.step(slot, p, &grads.slots[slot], lr));
            loss_sum += loss.as_f64() * batch.len() as f64;
            correct += trace.logits.argmax_rows().iter().zip(&labels).filter(|(p, y)| p == y).count();
            step += 1;
        }
        metrics.write(&MetricsRecord {
            stage: job.stage.into(),
            epoch,
            split: "train".into(),
            loss: loss_sum / n as f64,
            accuracy: correct as f64 / n as f64,
            lr,
            wall_ms: start.elapsed().as_millis() as u64,
        })?;
        if let Some(val) = job.val {
            let (loss, accuracy) = loss_and_accuracy(model, val)?;
            metrics.write(&MetricsRecord {
                stage: job.stage.into(),
                epoch,
                split: "val".into(),
                loss,
                accuracy,
                lr,
                wall_ms: start.elapsed().as_millis() as u64,
            })?;
        }
    }
    metrics.flush()
}

fn meta(stage: &str, arch: &str, epochs: usize, cfg: &TrainConfig) -> serde_json::Value {
    serde_json::json!({ "stage": stage, "arch": arch, "epochs": epochs, "config": cfg })
}

/// Trains a teacher on an original training split with hard labels.
pub fn train_teacher<T: Scalar>(
    ds: &LabeledImageSet,
    arch_id: &str,
    cfg: &TrainConfig,
    val: Option<&LabeledImageSet>,
    metrics: &mut JsonLines,
) -> Result<Model<T>> {
    cfg.validate()?;
    ds.validate(true)?;
    let mut model: Model<T> = crate::nets::build_model(arch_id, ds.class_count, ds.image_shape(), cfg.rng_seed)?;
    model.set_normalization(ds.normalization.clone())?;
    let hard = TrainConfig { label_mode: LabelMode::Hard, ..cfg.clone() };
    let job = Fit { images: &ds.images, labels: &ds.labels, teacher: None, val, classes: None, stage: "teacher", epochs: cfg.epochs };
    fit(&mut model, job, &hard, metrics)?;
    model.train_meta = meta("teacher", arch_id, cfg.epochs, cfg);
    Ok(model)
}

/// Trains a network on synthetic records, relabeled by `teacher` when
/// `cfg.label_mode` is soft. With `init` the weights start from it and the
/// epoch count is halved unless `warm_start_full_epochs` is set.
pub fn train_student<T: Scalar>(
    cum_synth: &[SyntheticRecord],
    teacher: &Model<T>,
    init: Option<&Model<T>>,
    arch_id: &str,
    cfg: &TrainConfig,
    metrics: &mut JsonLines,
) -> Result<Model<T>> {
    train_student_on(cum_synth, teacher, init, arch_id, cfg, "student", None, metrics)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn train_student_on<T: Scalar>(
    cum_synth: &[SyntheticRecord],
    teacher: &Model<T>,
    init: Option<&Model<T>>,
    arch_id: &str,
    cfg: &TrainConfig,
    stage: &str,
    classes: Option<&[usize]>,
    metrics: &mut JsonLines,
) -> Result<Model<T>> {
    cfg.validate()?;
    if cum_synth.is_empty() {
        return Err(Error::Config("no synthetic records to train on".into()));
    }
    let shape = teacher.input_shape();
    let (images, labels) = records_tensor(cum_synth, shape)?;
    if let Some(&bad) = labels.iter().find(|&&l| l >= teacher.class_count()) {
        return Err(Error::Shape(format!("label {bad} outside teacher's {} classes", teacher.class_count())));
    }
    let mut model: Model<T> = match init {
        Some(m) => {
            let requested: crate::nets::Arch = arch_id.parse()?;
            if m.arch() != requested || m.class_count() != teacher.class_count() || m.input_shape() != shape {
                return Err(Error::Config(format!(
                    "warm-start checkpoint is {} with {} classes, requested {arch_id} with {}",
                    m.arch_id(),
                    m.class_count(),
                    teacher.class_count()
                )));
            }
            m.clone()
        }
        None => crate::nets::build_model(arch_id, teacher.class_count(), shape, cfg.rng_seed)?,
    };
    model.set_normalization(teacher.normalization().clone())?;
    let epochs = cfg.effective_epochs(init.is_some());
    let job = Fit { images: &images, labels: &labels, teacher: Some(teacher), val: None, classes, stage, epochs };
    fit(&mut model, job, cfg, metrics)?;
    model.train_meta = meta(stage, arch_id, epochs, cfg);
    Ok(model)
}

/// Zeroes probabilities outside `classes` and renormalizes each row.
fn restrict_targets<T: Scalar>(q: &mut Tensor<T>, classes: &[usize]) {
    let k = q.dim(1);
    for row in q.data_mut().chunks_mut(k) {
        let mut sum = T::zero();
        for (c, v) in row.iter_mut().enumerate() {
            if classes.contains(&c) {
                sum += *v;
            } else {
                *v = T::zero();
            }
        }
        if sum > T::zero() {
            row.iter_mut().for_each(|v| *v /= sum);
        }
    }
}

pub(crate) fn records_tensor(records: &[SyntheticRecord], shape: [usize; 3]) -> Result<(Tensor<f32>, Vec<usize>)> {
    let slices: Vec<&[f32]> = records.iter().map(|r| r.image.as_slice()).collect();
    let images = Tensor::stack(&slices, &shape)?;
    Ok((images, records.iter().map(|r| r.label).collect()))
}

/// Per-sample predictions in eval mode, optionally restricted to `allowed` classes.
pub fn predict<T: Scalar>(model: &Model<T>, ds: &LabeledImageSet, allowed: Option<&[usize]>) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(ds.len());
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let logits = model.forward(&ds.batch::<T>(chunk), BnMode::Eval)?;
        let k = logits.dim(1);
        for row in logits.data().chunks(k) {
            let classes: Box<dyn Iterator<Item = usize>> = match allowed {
                Some(a) => Box::new(a.iter().copied()),
                None => Box::new(0..k),
            };
            let mut best: Option<usize> = None;
            for c in classes {
                if best.is_none_or(|b| row[c] > row[b]) {
                    best = Some(c);
                }
            }
            out.push(best.unwrap_or(0));
        }
    }
    Ok(out)
}

/// Top-1 accuracy, eval mode, no augmentation.
pub fn evaluate_model<T: Scalar>(model: &Model<T>, ds: &LabeledImageSet) -> Result<f64> {
    if ds.is_empty() {
        return Ok(0.0);
    }
    let pred = predict(model, ds, None)?;
    Ok(pred.iter().zip(&ds.labels).filter(|(p, y)| p == y).count() as f64 / ds.len() as f64)
}

fn loss_and_accuracy<T: Scalar>(model: &Model<T>, ds: &LabeledImageSet) -> Result<(f64, f64)> {
    let idx: Vec<usize> = (0..ds.len()).collect();
    let (mut loss, mut correct) = (0.0, 0usize);
    for chunk in idx.chunks(EVAL_BATCH) {
        let logits = model.forward(&ds.batch::<T>(chunk), BnMode::Eval)?;
        let labels = ds.labels_of(chunk);
        loss += cross_entropy(&logits, &labels).0.as_f64() * chunk.len() as f64;
        correct += logits.argmax_rows().iter().zip(&labels).filter(|(p, y)| p == y).count();
    }
    let n = ds.len().max(1) as f64;
    Ok((loss / n, correct as f64 / n))
}
