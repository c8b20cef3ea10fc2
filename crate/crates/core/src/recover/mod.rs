//! Synthesis optimizer: refines seed-initialized images under the
//! CE + BN-statistic objective, a seed anchor, and a teacher-gated
//! adversarial term against the previous student.

pub mod losses;

pub use losses::{
    adv_loss, adv_loss_gated, bn_stat_distance, ce_bn_loss, ce_bn_loss_with, cross_entropy, reg_loss, reg_loss_with,
    AdvLoss, AdvNorm, CeBnLoss, LossGrad, RegSpace, ADV_PROB_CAP,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_batch, augment_batch_backward, sample_view, AugmentConfig, View};
use crate::batching::{chunk, epoch_batches};
use crate::data::SyntheticRecord;
use crate::error::{Error, Result};
use crate::io::JsonLines;
use crate::nets::{BnMode, Model};
use crate::optim::{cosine_lr, LrSchedule, Optimizer, OptimizerKind};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which synthetic images receive the adversarial term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateMode {
    /// Teacher-correct images, re-evaluated on the current views every step.
    Dynamic,
    /// Teacher-correct images at initialization, fixed thereafter.
    Static,
    /// Every image (no teacher constraint).
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Batching {
    /// Minibatches shuffled across classes.
    Mixed,
    /// Each minibatch holds a single class.
    PerClass,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "crate::config::SynthesisFile", try_from = "crate::config::SynthesisFile")]
pub struct SynthesisConfig {
    pub alpha_reg: f64,
    pub alpha_adv: f64,
    pub lambda_bn: f64,
    pub reg_space: RegSpace,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub lr_schedule: LrSchedule,
    pub iterations: usize,
    pub batch_size: usize,
    pub augmentation: AugmentConfig,
    pub adv_norm: AdvNorm,
    pub gate: GateMode,
    pub batching: Batching,
    pub rng_seed: u64,
}

impl Default for SynthesisConfig {
    /// CIFAR-10 recipe.
    fn default() -> Self {
        SynthesisConfig {
            alpha_reg: 1.0,
            alpha_adv: 1.0,
            lambda_bn: 1.0,
            reg_space: RegSpace::Pixel,
            optimizer: OptimizerKind::Adam { beta1: 0.5, beta2: 0.9 },
            learning_rate: 0.25,
            weight_decay: 1e-4,
            lr_schedule: LrSchedule::Cosine,
            iterations: 1000,
            batch_size: 10,
            augmentation: AugmentConfig { horizontal_flip: false, ..AugmentConfig::default() },
            adv_norm: AdvNorm::Gated,
            gate: GateMode::Dynamic,
            batching: Batching::Mixed,
            rng_seed: 0,
        }
    }
}

impl SynthesisConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [("alpha_reg", self.alpha_reg), ("alpha_adv", self.alpha_adv), ("lambda_bn", self.lambda_bn)];
        for (name, w) in weights {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite non-negative number, got {w}")));
            }
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch_size must be at least 2, got {}", self.batch_size)));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// Seed images a subset is initialized from.
#[derive(Clone, Debug)]
pub struct SeedImages {
    /// `N x C x H x W`, raw pixels.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub seed_indices: Vec<Option<usize>>,
}

/// One loss-trace line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossTraceRecord {
    pub iter: usize,
    pub loss_total: f64,
    pub loss_ce: f64,
    pub loss_bn: f64,
    pub loss_reg: f64,
    pub loss_adv: f64,
    pub gate_fraction: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct SynthesisOutput {
    pub records: Vec<SyntheticRecord>,
    pub trace: Vec<LossTraceRecord>,
}

/// Loss components of one objective evaluation.
#[derive(Clone, Debug)]
pub struct ObjectiveTerms<T> {
    pub ce: T,
    pub bn: T,
    pub reg: T,
    pub adv: T,
    pub total: T,
    pub gate: Vec<bool>,
    pub grad: Tensor<T>,
}

/// The full synthesis objective on one batch: `images` are the underlying
/// pixels, `views` the augmentation applied before both networks.
#[allow(clippy::too_many_arguments)]
pub fn objective<T: Scalar>(
    teacher: &Model<T>,
    student: Option<&Model<T>>,
    images: &Tensor<T>,
    labels: &[usize],
    seeds: &[Option<&[T]>],
    views: &[View],
    static_gate: Option<&[bool]>,
    cfg: &SynthesisConfig,
) -> Result<ObjectiveTerms<T>> {
    let augmented = augment_batch(images, views);
    let cebn = ce_bn_loss(teacher, &augmented, labels, cfg.lambda_bn)?;
    let mut view_grad = cebn.grad;
    let mut adv = T::zero();
    let mut gate = vec![false; labels.len()];
    if let Some(student) = student {
        gate = match cfg.gate {
            GateMode::Dynamic => cebn.teacher_pred.iter().zip(labels).map(|(p, y)| p == y).collect(),
            GateMode::Static => static_gate.map(|g| g.to_vec()).unwrap_or_else(|| vec![true; labels.len()]),
            GateMode::None => vec![true; labels.len()],
        };
        if cfg.alpha_adv > 0.0 {
            let a = adv_loss_gated(student, &augmented, labels, &gate, cfg.adv_norm, None)?;
            let w = T::of(cfg.alpha_adv);
            for (g, &d) in view_grad.data_mut().iter_mut().zip(a.grad.data()) {
                *g += w * d;
            }
            adv = a.value;
        }
    }
    let mut grad = augment_batch_backward(&view_grad, views);
    let mut reg = T::zero();
    if cfg.alpha_reg > 0.0 {
        let r = reg_loss(images, seeds, cfg.reg_space, teacher)?;
        let w = T::of(cfg.alpha_reg);
        for (g, &d) in grad.data_mut().iter_mut().zip(r.grad.data()) {
            *g += w * d;
        }
        reg = r.value;
    }
    let total = cebn.value + T::of(cfg.alpha_reg) * reg + T::of(cfg.alpha_adv) * adv;
    Ok(ObjectiveTerms { ce: cebn.ce, bn: cebn.bn, reg, adv, total, gate, grad })
}

/// Optimizes one curriculum's subset starting from the exact seed pixels.
/// The adversarial term is omitted when `student_prev` is `None`.
pub fn synthesize_subset<T: Scalar>(
    teacher: &Model<T>,
    student_prev: Option<&Model<T>>,
    seeds: &SeedImages,
    curriculum_index: usize,
    cfg: &SynthesisConfig,
    trace_sink: &mut JsonLines,
) -> Result<SynthesisOutput> {
    cfg.validate()?;
    let n = seeds.labels.len();
    if n == 0 {
        return Err(Error::Config("no seed images to synthesize from".into()));
    }
    if seeds.images.dim(0) != n || seeds.seed_indices.len() != n {
        return Err(Error::Shape("seed images, labels and indices differ in length".into()));
    }
    if n < 2 {
        return Err(Error::Shape("synthesis needs at least 2 images for batch statistics".into()));
    }
    let [_, c, h, w] = [seeds.images.dim(0), seeds.images.dim(1), seeds.images.dim(2), seeds.images.dim(3)];
    let shape = [c, h, w];
    let seed_pixels: Vec<Vec<T>> = (0..n).map(|i| seeds.images.sample(i).iter().map(|&v| T::of(v as f64)).collect()).collect();
    let mut pixels = seed_pixels.clone();
    let mut optimizer = Optimizer::<T>::new(cfg.optimizer, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);

    let static_gate: Option<Vec<bool>> = match (cfg.gate, student_prev) {
        (GateMode::Static, Some(_)) => {
            let all = Tensor::stack(&pixels.iter().map(|p| p.as_slice()).collect::<Vec<_>>(), &shape)?;
            let pred = teacher.forward(&all, BnMode::Eval)?.argmax_rows();
            Some(pred.iter().zip(&seeds.labels).map(|(p, y)| p == y).collect())
        }
        _ => None,
    };

    let mut trace = Vec::with_capacity(cfg.iterations);
    let mut queue: Vec<Vec<usize>> = Vec::new();
    for iter in 0..cfg.iterations {
        if queue.is_empty() {
            queue = match cfg.batching {
                Batching::Mixed => epoch_batches(n, cfg.batch_size, &mut rng),
                Batching::PerClass => per_class_batches(&seeds.labels, cfg.batch_size, &mut rng)?,
            };
            queue.reverse();
        }
        let batch = queue.pop().expect("refilled above");
        let lr = cosine_lr(cfg.learning_rate, iter, cfg.iterations);
        let views: Vec<View> = if cfg.augmentation.is_identity() {
            vec![View::identity(h, w); batch.len()]
        } else {
            batch.iter().map(|_| sample_view(&mut rng, h, w, &cfg.augmentation)).collect()
        };
        let x = Tensor::stack(&batch.iter().map(|&i| pixels[i].as_slice()).collect::<Vec<_>>(), &shape)?;
        let labels: Vec<usize> = batch.iter().map(|&i| seeds.labels[i]).collect();
        let seed_refs: Vec<Option<&[T]>> =
            batch.iter().map(|&i| seeds.seed_indices[i].map(|_| seed_pixels[i].as_slice())).collect();
        let gate_slice: Option<Vec<bool>> = static_gate.as_ref().map(|g| batch.iter().map(|&i| g[i]).collect());
        let terms = objective(teacher, student_prev, &x, &labels, &seed_refs, &views, gate_slice.as_deref(), cfg);
        let terms = match terms {
            Ok(t) if t.total.is_finite() && t.grad.all_finite() => t,
            Ok(_) | Err(Error::NonFinite(_)) => {
                return Err(Error::Diverged {
                    iteration: iter,
                    last_finite: Box::new(to_records(&pixels, seeds, curriculum_index)),
                })
            }
            Err(e) => return Err(e),
        };
        for (k, &i) in batch.iter().enumerate() {
            let p = &mut pixels[i];
            optimizer.step(i, p, terms.grad.sample(k), lr);
            for v in p.iter_mut() {
                *v = v.max(T::zero()).min(T::one());
            }
        }
        let record = LossTraceRecord {
            iter,
            loss_total: terms.total.as_f64(),
            loss_ce: terms.ce.as_f64(),
            loss_bn: terms.bn.as_f64(),
            loss_reg: terms.reg.as_f64(),
            loss_adv: terms.adv.as_f64(),
            gate_fraction: terms.gate.iter().filter(|&&g| g).count() as f64 / batch.len() as f64,
            lr,
        };
        trace_sink.write(&record)?;
        trace.push(record);
    }
    trace_sink.flush()?;
    Ok(SynthesisOutput { records: to_records(&pixels, seeds, curriculum_index), trace })
}

fn per_class_batches(labels: &[usize], batch_size: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<usize>>> {
    use rand::seq::SliceRandom;
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut out = Vec::new();
    for c in 0..classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if idx.is_empty() {
            continue;
        }
        if idx.len() < 2 {
            return Err(Error::Config(format!("per-class batching needs 2 images of class {c}")));
        }
        idx.shuffle(rng);
        out.extend(chunk(idx, batch_size));
    }
    out.shuffle(rng);
    Ok(out)
}

fn to_records<T: Scalar>(pixels: &[Vec<T>], seeds: &SeedImages, curriculum_index: usize) -> Vec<SyntheticRecord> {
    pixels
        .iter()
        .enumerate()
        .map(|(i, p)| SyntheticRecord {
            image: p.iter().map(|v| v.as_f64() as f32).collect(),
            label: seeds.labels[i],
            seed_index: seeds.seed_indices[i],
            curriculum_index,
        })
        .collect()
}
