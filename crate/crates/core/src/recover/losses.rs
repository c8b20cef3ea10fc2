//! The three synthesis objectives with analytic gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{log_softmax, softmax_probs, Backprop, BnMode, ChannelStats, Model, ParamGrads, StatGrad};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Upper bound applied to the student's true-class probability before the log.
pub const ADV_PROB_CAP: f64 = 1.0 - 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegSpace {
    Pixel,
    Feature,
}

/// How the adversarial term is averaged.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdvNorm {
    /// Divide by the number of gated samples.
    Gated,
    /// Divide by the full batch size.
    Batch,
}

#[derive(Clone, Debug)]
pub struct CeBnLoss<T> {
    pub ce: T,
    /// Unweighted BN statistic distance.
    pub bn: T,
    /// `ce + lambda_bn * bn`
    pub value: T,
    /// Gradient of `value` with respect to the input pixels.
    pub grad: Tensor<T>,
    /// Argmax of the teacher logits per sample.
    pub teacher_pred: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct LossGrad<T> {
    pub value: T,
    pub grad: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct AdvLoss<T> {
    pub value: T,
    pub grad: Tensor<T>,
    pub gate: Vec<bool>,
}

fn check_labels(labels: &[usize], n: usize, classes: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::Shape(format!("{n} images but {} labels", labels.len())));
    }
    if labels.iter().any(|&l| l >= classes) {
        return Err(Error::Shape(format!("label outside [0, {classes})")));
    }
    Ok(())
}

/// Mean cross-entropy of `logits` against hard labels and its logit gradient.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> (T, Tensor<T>) {
    let n = logits.dim(0);
    let logp = log_softmax(logits);
    let k = logits.dim(1);
    let inv_n = T::one() / T::of(n as f64);
    let mut loss = T::zero();
    let mut grad = logp.map(|v| v.exp() * inv_n);
    for (i, &y) in labels.iter().enumerate() {
        loss -= logp.data()[i * k + y];
        grad.data_mut()[i * k + y] -= inv_n;
    }
    (loss * inv_n, grad)
}

/// Distance between batch and running statistics summed over layers, and
/// its gradient with respect to each layer's batch statistics.
pub fn bn_stat_distance<T: Scalar>(batch: &[ChannelStats<T>], running: &[ChannelStats<T>]) -> (T, Vec<StatGrad<T>>) {
    let mut total = T::zero();
    let mut grads = Vec::with_capacity(batch.len());
    for (b, r) in batch.iter().zip(running) {
        let (dm, gm) = l2_with_grad(&b.mean, &r.mean);
        let (ds, gs) = l2_with_grad(&b.std, &r.std);
        total += dm + ds;
        grads.push(StatGrad { mean: gm, std: gs });
    }
    (total, grads)
}

fn l2_with_grad<T: Scalar>(a: &[T], b: &[T]) -> (T, Vec<T>) {
    let diff: Vec<T> = a.iter().zip(b).map(|(&x, &y)| x - y).collect();
    let norm = diff.iter().map(|&d| d * d).sum::<T>().sqrt();
    let grad = if norm > T::zero() { diff.iter().map(|&d| d / norm).collect() } else { vec![T::zero(); diff.len()] };
    (norm, grad)
}

/// Cross-entropy on teacher predictions plus `lambda_bn` times the BN
/// statistic distance. The teacher normalizes with its running statistics
/// while the batch statistics of every BN input are recorded.
pub fn ce_bn_loss<T: Scalar>(
    teacher: &Model<T>,
    images: &Tensor<T>,
    labels: &[usize],
    lambda_bn: f64,
) -> Result<CeBnLoss<T>> {
    ce_bn_loss_with(teacher, images, labels, lambda_bn, None)
}

/// [`ce_bn_loss`] that also accumulates teacher parameter gradients.
pub fn ce_bn_loss_with<T: Scalar>(
    teacher: &Model<T>,
    images: &Tensor<T>,
    labels: &[usize],
    lambda_bn: f64,
    param_grads: Option<&mut ParamGrads<T>>,
) -> Result<CeBnLoss<T>> {
    let n = images.shape().first().copied().unwrap_or(0);
    if n < 2 {
        return Err(Error::Shape("ce_bn_loss needs at least 2 images".into()));
    }
    check_labels(labels, n, teacher.class_count())?;
    let trace = teacher.forward_trace(images, BnMode::Capture)?;
    let (ce, dlogits) = cross_entropy(&trace.logits, labels);
    let stats = trace.batch_stats().expect("capture records stats");
    let (bn, mut stat_grads) = bn_stat_distance(&stats, &teacher.bn_running());
    let lam = T::of(lambda_bn);
    for g in &mut stat_grads {
        g.mean.iter_mut().chain(g.std.iter_mut()).for_each(|v| *v *= lam);
    }
    let value = ce + lam * bn;
    if !value.is_finite() {
        return Err(Error::NonFinite("ce_bn_loss".into()));
    }
    let seeds = Backprop { logits: Some(&dlogits), features: None, stats: Some(&stat_grads) };
    let grad = teacher.backward(&trace, seeds, param_grads, true).expect("input gradient requested");
    Ok(CeBnLoss { ce, bn, value, grad, teacher_pred: trace.logits.argmax_rows() })
}

/// Mean squared distance to the seed images. Records without a seed
/// (`None`) are excluded; the mean runs over the included elements.
pub fn reg_loss<T: Scalar>(
    images: &Tensor<T>,
    seeds: &[Option<&[T]>],
    space: RegSpace,
    teacher: &Model<T>,
) -> Result<LossGrad<T>> {
    reg_loss_with(images, seeds, space, teacher, None)
}

pub fn reg_loss_with<T: Scalar>(
    images: &Tensor<T>,
    seeds: &[Option<&[T]>],
    space: RegSpace,
    teacher: &Model<T>,
    param_grads: Option<&mut ParamGrads<T>>,
) -> Result<LossGrad<T>> {
    let n = images.dim(0);
    if seeds.len() != n {
        return Err(Error::Shape(format!("{n} images but {} seed slots", seeds.len())));
    }
    let sample = images.sample_len();
    for s in seeds.iter().flatten() {
        if s.len() != sample {
            return Err(Error::Shape("seed image shape differs".into()));
        }
    }
    let included: Vec<usize> = (0..n).filter(|&i| seeds[i].is_some()).collect();
    let mut grad = Tensor::zeros(images.shape());
    if included.is_empty() {
        return Ok(LossGrad { value: T::zero(), grad });
    }
    match space {
        RegSpace::Pixel => {
            let count = T::of((included.len() * sample) as f64);
            let mut value = T::zero();
            for &i in &included {
                let s = seeds[i].expect("included");
                let x = images.sample(i);
                let g = grad.sample_mut(i);
                for j in 0..sample {
                    let d = x[j] - s[j];
                    value += d * d;
                    g[j] = (d + d) / count;
                }
            }
            Ok(LossGrad { value: value / count, grad })
        }
        RegSpace::Feature => {
            let x = images.select(&included);
            let seed_slices: Vec<&[T]> = included.iter().map(|&i| seeds[i].expect("included")).collect();
            let seed_batch = Tensor::stack(&seed_slices, &images.shape()[1..])?;
            let target = teacher.features(&seed_batch)?;
            let trace = teacher.forward_trace(&x, BnMode::Eval)?;
            let count = T::of(target.len() as f64);
            let mut value = T::zero();
            let mut dfeat = Tensor::zeros(target.shape());
            for ((g, &f), &t) in dfeat.data_mut().iter_mut().zip(trace.features.data()).zip(target.data()) {
                let d = f - t;
                value += d * d;
                *g = (d + d) / count;
            }
            let mut param_grads = param_grads;
            if let Some(g) = param_grads.as_deref_mut() {
                // The seed targets depend on the teacher parameters too.
                let seed_trace = teacher.forward_trace(&seed_batch, BnMode::Eval)?;
                let neg = dfeat.map(|v| -v);
                let bp = Backprop { logits: None, features: Some(&neg), stats: None };
                teacher.backward(&seed_trace, bp, Some(g), false);
            }
            let seeds_bp = Backprop { logits: None, features: Some(&dfeat), stats: None };
            let gx = teacher.backward(&trace, seeds_bp, param_grads, true).expect("input gradient requested");
            for (k, &i) in included.iter().enumerate() {
                grad.sample_mut(i).copy_from_slice(gx.sample(k));
            }
            Ok(LossGrad { value: value / count, grad })
        }
    }
}

/// Non-saturating adversarial loss on the student's softmax, restricted to
/// the samples the teacher currently classifies correctly.
pub fn adv_loss<T: Scalar>(
    student: &Model<T>,
    teacher: &Model<T>,
    images: &Tensor<T>,
    labels: &[usize],
    norm: AdvNorm,
) -> Result<AdvLoss<T>> {
    check_labels(labels, images.dim(0), teacher.class_count())?;
    let pred = teacher.forward(images, BnMode::Eval)?.argmax_rows();
    let gate: Vec<bool> = pred.iter().zip(labels).map(|(p, y)| p == y).collect();
    adv_loss_gated(student, images, labels, &gate, norm, None)
}

/// Adversarial loss with an explicit gate; accumulates student parameter
/// gradients when `param_grads` is given.
pub fn adv_loss_gated<T: Scalar>(
    student: &Model<T>,
    images: &Tensor<T>,
    labels: &[usize],
    gate: &[bool],
    norm: AdvNorm,
    param_grads: Option<&mut ParamGrads<T>>,
) -> Result<AdvLoss<T>> {
    let n = images.dim(0);
    check_labels(labels, n, student.class_count())?;
    let gated = gate.iter().filter(|&&g| g).count();
    if gated == 0 {
        return Ok(AdvLoss { value: T::zero(), grad: Tensor::zeros(images.shape()), gate: gate.to_vec() });
    }
    let trace = student.forward_trace(images, BnMode::Eval)?;
    let probs = softmax_probs(&trace.logits)?;
    let k = student.class_count();
    let denom = T::of(match norm {
        AdvNorm::Gated => gated,
        AdvNorm::Batch => n,
    } as f64);
    let cap = T::of(ADV_PROB_CAP);
    let mut value = T::zero();
    let mut dlogits = Tensor::zeros(trace.logits.shape());
    for i in (0..n).filter(|&i| gate[i]) {
        let y = labels[i];
        let row = &probs.data()[i * k..(i + 1) * k];
        let p = row[y];
        if p >= cap {
            value -= (T::one() - cap).ln();
            continue;
        }
        let rest = T::one() - p;
        value -= rest.ln();
        // d/dz_j of -log(1 - p_y) = p_y * (delta_jy - p_j) / (1 - p_y)
        let g = &mut dlogits.data_mut()[i * k..(i + 1) * k];
        for j in 0..k {
            let delta = if j == y { T::one() } else { T::zero() };
            g[j] = p * (delta - row[j]) / rest / denom;
        }
    }
    value /= denom;
    let seeds = Backprop { logits: Some(&dlogits), features: None, stats: None };
    let mut grad = student.backward(&trace, seeds, param_grads, true).expect("input gradient requested");
    // Non-gated samples receive no gradient at all, not a rounding residue.
    for i in (0..n).filter(|&i| !gate[i]) {
        grad.sample_mut(i).fill(T::zero());
    }
    Ok(AdvLoss { value, grad, gate: gate.to_vec() })
}
