//! Shared fixtures and oracles for integration tests.
#![allow(dead_code)]

pub mod grad;

use std::sync::OnceLock;

use cudd::config::{preset, RunConfig};
use cudd::data::{toy2, LabeledImageSet, Split};
use cudd::io::JsonLines;
use cudd::nets::{build_model, BnMode, ChannelStats, Model};
use cudd::train::train_teacher;
use cudd::{Model32, Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TINY_SHAPE: [usize; 3] = [3, 8, 8];

pub fn random_batch(n: usize, shape: [usize; 3], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = n * shape.iter().product::<usize>();
    Tensor::from_vec(&[n, shape[0], shape[1], shape[2]], (0..len).map(|_| rng.random::<f64>()).collect()).unwrap()
}

/// A tiny network with perturbed parameters and non-trivial running statistics.
pub fn tiny_net(arch: &str, seed: u64) -> Model<f64> {
    net_with_shape(arch, TINY_SHAPE, seed)
}

pub fn net_with_shape(arch: &str, shape: [usize; 3], seed: u64) -> Model<f64> {
    let mut m: Model<f64> = build_model(arch, 2, shape, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    m.visit_params_mut(&mut |_, p| p.iter_mut().for_each(|v| *v += 0.1 * (rng.random::<f64>() - 0.5)));
    let x = random_batch(6, shape, seed + 200);
    let stats = m.forward_trace(&x, BnMode::Train).unwrap().batch_stats().unwrap();
    let jittered: Vec<ChannelStats<f64>> = stats
        .iter()
        .map(|s| ChannelStats {
            mean: s.mean.iter().map(|v| v + 0.2 * (rng.random::<f64>() - 0.5)).collect(),
            std: s.std.iter().map(|v| v * (0.8 + 0.4 * rng.random::<f64>())).collect(),
        })
        .collect();
    m.absorb_batch_stats(&jittered, 0.9);
    m
}

/// Relative error `|a - n| / max(|a|, |n|)` of the vectors, with a floor
/// guarding all-zero gradients.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / na.max(nn).max(1e-12)
}

/// Central difference of `f` at the coordinates `coords` of `x`.
pub fn numeric_grad(x: &mut [f64], coords: &[usize], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    coords
        .iter()
        .map(|&i| {
            let orig = x[i];
            x[i] = orig + h;
            let up = f(x);
            x[i] = orig - h;
            let down = f(x);
            x[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn sample_coords(len: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if len <= count {
        return (0..len).collect();
    }
    rand::seq::index::sample(&mut rng, len, count).into_vec()
}

/// Flat parameter vector in slot order.
pub fn flat_params(m: &Model<f64>) -> Vec<f64> {
    let mut v = Vec::new();
    m.visit_params(&mut |_, p| v.extend_from_slice(p));
    v
}

pub fn set_flat_params(m: &mut Model<f64>, flat: &[f64]) {
    let mut off = 0;
    m.visit_params_mut(&mut |_, p| {
        p.copy_from_slice(&flat[off..off + p.len()]);
        off += p.len();
    });
}

pub fn flat_grads(g: &cudd::nets::ParamGrads<f64>) -> Vec<f64> {
    g.slots.iter().flatten().copied().collect()
}

/// Brute-force per-channel mean and biased standard deviation plus epsilon.
pub fn stats_oracle(x: &Tensor<f64>) -> ChannelStats<f64> {
    let s = x.shape();
    let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
    let mut mean = vec![0.0; c];
    let mut std = vec![0.0; c];
    for ch in 0..c {
        let vals: Vec<f64> = (0..n).flat_map(|i| x.data()[(i * c + ch) * hw..(i * c + ch + 1) * hw].to_vec()).collect();
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64;
        mean[ch] = m;
        std[ch] = (var + cudd::nets::BN_EPS).sqrt();
    }
    ChannelStats { mean, std }
}

/// Pre-BN activations of a single-BN ConvNet computed from its weights with
/// a direct convolution, in double precision.
pub fn pre_bn_oracle<T: Scalar>(model: &Model<T>, x: &Tensor<T>) -> Tensor<f64> {
    let mut weight = Vec::new();
    model.visit_params(&mut |slot, p| {
        if slot == 0 {
            weight = p.iter().map(|v| v.as_f64()).collect();
        }
    });
    let norm = model.normalization();
    let s = x.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let cout = weight.len() / (c * 9);
    let mut y = Tensor::zeros(&[n, cout, h, w]);
    for i in 0..n {
        for o in 0..cout {
            for oy in 0..h {
                for ox in 0..w {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (iy, ix) = (oy as isize + ky as isize - 1, ox as isize + kx as isize - 1);
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let v = x.data()[((i * c + ci) * h + iy as usize) * w + ix as usize].as_f64();
                                let v = (v - norm.mean[ci]) / norm.std[ci];
                                acc += weight[((o * c + ci) * 3 + ky) * 3 + kx] * v;
                            }
                        }
                    }
                    y.data_mut()[((i * cout + o) * h + oy) * w + ox] = acc;
                }
            }
        }
    }
    y
}

pub fn toy_preset() -> RunConfig {
    preset("toy2").unwrap()
}

pub fn toy_train() -> &'static LabeledImageSet {
    static DS: OnceLock<LabeledImageSet> = OnceLock::new();
    DS.get_or_init(|| toy2(Split::Train))
}

pub fn toy_val() -> &'static LabeledImageSet {
    static DS: OnceLock<LabeledImageSet> = OnceLock::new();
    DS.get_or_init(|| toy2(Split::Val))
}

/// The toy2 preset teacher, trained once per test binary.
pub fn toy_teacher() -> &'static Model32 {
    static T: OnceLock<Model32> = OnceLock::new();
    T.get_or_init(|| {
        let cfg = toy_preset();
        train_teacher(toy_train(), &cfg.teacher_arch, &cfg.squeeze, None, &mut JsonLines::discard()).unwrap()
    })
}
