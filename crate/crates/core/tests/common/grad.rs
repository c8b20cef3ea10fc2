//! Finite-difference gradient suite over the three synthesis losses.

use super::*;
use cudd::nets::Model;
use cudd::recover::{adv_loss_gated, ce_bn_loss, ce_bn_loss_with, reg_loss, reg_loss_with, AdvNorm, RegSpace};
use cudd::Tensor;

pub const GRAD_TOL: f64 = 1e-4;
const H: f64 = 1e-5;
const ARCHS: [&str; 2] = ["convnet-1-w4", "resnet18-cifar-w2"];

fn pixel_check(x: &Tensor<f64>, analytic: &Tensor<f64>, seed: u64, f: impl Fn(&Tensor<f64>) -> f64) -> f64 {
    let coords = sample_coords(x.len(), 48, seed);
    let shape = x.shape().to_vec();
    let mut flat = x.data().to_vec();
    let numeric = numeric_grad(&mut flat, &coords, H, |v| f(&Tensor::from_vec(&shape, v.to_vec()).unwrap()));
    let a: Vec<f64> = coords.iter().map(|&i| analytic.data()[i]).collect();
    rel_err(&a, &numeric)
}

fn param_check(model: &Model<f64>, analytic: &[f64], seed: u64, f: impl Fn(&Model<f64>) -> f64) -> f64 {
    let mut flat = flat_params(model);
    let coords = sample_coords(flat.len(), 64, seed);
    let mut probe = model.clone();
    let numeric = numeric_grad(&mut flat, &coords, H, |p| {
        set_flat_params(&mut probe, p);
        f(&probe)
    });
    let a: Vec<f64> = coords.iter().map(|&i| analytic[i]).collect();
    rel_err(&a, &numeric)
}

/// `(check name, relative error)` pairs.
pub type GradReport = Vec<(String, f64)>;

pub fn ce_bn_checks() -> GradReport {
    let mut out = Vec::new();
    for (k, arch) in ARCHS.iter().enumerate() {
        let teacher = tiny_net(arch, k as u64);
        let x = random_batch(4, TINY_SHAPE, 10 + k as u64);
        let labels = [0, 1, 1, 0];
        let lam = 0.7;
        let mut grads = teacher.zero_grads();
        let loss = ce_bn_loss_with(&teacher, &x, &labels, lam, Some(&mut grads)).unwrap();
        out.push((format!("{arch} ce_bn pixel"), pixel_check(&x, &loss.grad, 1, |x| ce_bn_loss(&teacher, x, &labels, lam).unwrap().value)));
        out.push((
            format!("{arch} ce_bn param"),
            param_check(&teacher, &flat_grads(&grads), 2, |t| ce_bn_loss(t, &x, &labels, lam).unwrap().value),
        ));
    }
    out
}

pub fn reg_checks() -> GradReport {
    let mut out = Vec::new();
    for (k, arch) in ARCHS.iter().enumerate() {
        let teacher = tiny_net(arch, 20 + k as u64);
        let x = random_batch(3, TINY_SHAPE, 30 + k as u64);
        let s = random_batch(3, TINY_SHAPE, 40 + k as u64);
        let seeds: Vec<Option<&[f64]>> = vec![Some(s.sample(0)), None, Some(s.sample(2))];
        for space in [RegSpace::Pixel, RegSpace::Feature] {
            let mut grads = teacher.zero_grads();
            let r = reg_loss_with(&x, &seeds, space, &teacher, Some(&mut grads)).unwrap();
            assert!(r.grad.sample(1).iter().all(|&g| g == 0.0), "seedless record must get no gradient");
            out.push((format!("{arch} reg {space:?} pixel"), pixel_check(&x, &r.grad, 3, |x| reg_loss(x, &seeds, space, &teacher).unwrap().value)));
            if space == RegSpace::Feature {
                out.push((
                    format!("{arch} reg {space:?} param"),
                    param_check(&teacher, &flat_grads(&grads), 4, |t| reg_loss(&x, &seeds, space, t).unwrap().value),
                ));
            }
        }
    }
    out
}

pub fn adv_checks() -> GradReport {
    let mut out = Vec::new();
    for (k, arch) in ARCHS.iter().enumerate() {
        let student = tiny_net(arch, 50 + k as u64);
        let x = random_batch(4, TINY_SHAPE, 60 + k as u64);
        let labels = [1, 0, 1, 0];
        let gate = [true, false, true, true];
        for norm in [AdvNorm::Gated, AdvNorm::Batch] {
            let mut grads = student.zero_grads();
            let a = adv_loss_gated(&student, &x, &labels, &gate, norm, Some(&mut grads)).unwrap();
            out.push((
                format!("{arch} adv {norm:?} pixel"),
                pixel_check(&x, &a.grad, 5, |x| adv_loss_gated(&student, x, &labels, &gate, norm, None).unwrap().value),
            ));
            out.push((
                format!("{arch} adv {norm:?} param"),
                param_check(&student, &flat_grads(&grads), 6, |s| adv_loss_gated(s, &x, &labels, &gate, norm, None).unwrap().value),
            ));
        }
    }
    out
}

/// The ImageNet-style stem (7x7 stride 2, max pool) needs 32x32 inputs.
pub fn max_pool_stem_checks() -> GradReport {
    let shape = [3, 32, 32];
    let teacher = net_with_shape("resnet18-w2", shape, 7);
    let x = random_batch(2, shape, 8);
    let labels = [1, 0];
    let mut grads = teacher.zero_grads();
    let loss = ce_bn_loss_with(&teacher, &x, &labels, 1.0, Some(&mut grads)).unwrap();
    vec![
        ("resnet18 ce_bn pixel".into(), pixel_check(&x, &loss.grad, 9, |x| ce_bn_loss(&teacher, x, &labels, 1.0).unwrap().value)),
        (
            "resnet18 ce_bn param".into(),
            param_check(&teacher, &flat_grads(&grads), 10, |t| ce_bn_loss(t, &x, &labels, 1.0).unwrap().value),
        ),
    ]
}
