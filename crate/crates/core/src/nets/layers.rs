//! Layer primitives with explicit forward caches and backward passes.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::scalar::{matmul, matmul_nt, matmul_tn, Scalar};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;

/// Per-channel mean and standard deviation of one BN layer's input.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats<T> {
    pub mean: Vec<T>,
    pub std: Vec<T>,
}

impl<T: Scalar> ChannelStats<T> {
    pub fn identity(channels: usize) -> Self {
        ChannelStats { mean: vec![T::zero(); channels], std: vec![T::one(); channels] }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

/// How BN layers normalize during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics; statistics are recorded.
    Train,
    /// Normalize with running statistics; nothing recorded.
    Eval,
    /// Normalize with running statistics and record batch statistics so
    /// losses on them can be differentiated.
    Capture,
}

impl BnMode {
    pub fn records_stats(self) -> bool {
        !matches!(self, BnMode::Eval)
    }
}

pub(crate) struct SlotCounter(pub usize);

impl SlotCounter {
    pub fn next(&mut self) -> usize {
        let s = self.0;
        self.0 += 1;
        s
    }
}

// ---------------------------------------------------------------- conv

#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    /// `cout x (cin * kernel * kernel)`
    pub weight: Vec<T>,
    pub slot: usize,
}

pub struct ConvCache<T> {
    cols: Vec<T>,
    in_shape: [usize; 4],
}

impl<T: Scalar> Conv2d<T> {
    pub(crate) fn new(
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut impl Rng,
        slots: &mut SlotCounter,
    ) -> Self {
        let fan_in = (cin * kernel * kernel) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
        let weight = (0..cout * cin * kernel * kernel).map(|_| T::of(normal.sample(rng))).collect();
        Conv2d { cin, cout, kernel, stride, pad, weight, slot: slots.next() }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        ((h + 2 * self.pad - self.kernel) / self.stride + 1, (w + 2 * self.pad - self.kernel) / self.stride + 1)
    }

    fn col_rows(&self) -> usize {
        self.cin * self.kernel * self.kernel
    }

    fn im2col(&self, x: &[T], h: usize, w: usize, cols: &mut [T]) {
        let (ho, wo) = self.out_hw(h, w);
        let k = self.kernel;
        for c in 0..self.cin {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let line = &mut dst[oy * wo..(oy + 1) * wo];
                        if iy < 0 || iy >= h as isize {
                            line.fill(T::zero());
                            continue;
                        }
                        let src = &x[(c * h + iy as usize) * w..(c * h + iy as usize + 1) * w];
                        for (ox, d) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            *d = if ix < 0 || ix >= w as isize { T::zero() } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[T], h: usize, w: usize, dx: &mut [T]) {
        let (ho, wo) = self.out_hw(h, w);
        let k = self.kernel;
        for c in 0..self.cin {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = (c * h + iy as usize) * w;
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dx[base + ix as usize] += src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> (Tensor<T>, ConvCache<T>) {
        let [n, c, h, w] = shape4(x);
        assert_eq!(c, self.cin, "conv input channels");
        let (ho, wo) = self.out_hw(h, w);
        let rows = self.col_rows();
        let per = rows * ho * wo;
        let mut cols = vec![T::zero(); n * per];
        let mut y = Tensor::zeros(&[n, self.cout, ho, wo]);
        for i in 0..n {
            let col = &mut cols[i * per..(i + 1) * per];
            self.im2col(x.sample(i), h, w, col);
            matmul(self.cout, rows, ho * wo, &self.weight, col, y.sample_mut(i), false);
        }
        (y, ConvCache { cols, in_shape: [n, c, h, w] })
    }

    pub fn backward(
        &self,
        cache: &ConvCache<T>,
        dy: &Tensor<T>,
        dweight: Option<&mut [T]>,
        need_dx: bool,
    ) -> Option<Tensor<T>> {
        let [n, c, h, w] = cache.in_shape;
        let (ho, wo) = self.out_hw(h, w);
        let rows = self.col_rows();
        let per = rows * ho * wo;
        if let Some(dw) = dweight {
            for i in 0..n {
                matmul_nt(self.cout, ho * wo, rows, dy.sample(i), &cache.cols[i * per..(i + 1) * per], dw, true);
            }
        }
        if !need_dx {
            return None;
        }
        let mut dx = Tensor::zeros(&[n, c, h, w]);
        let mut dcols = vec![T::zero(); per];
        for i in 0..n {
            matmul_tn(rows, self.cout, ho * wo, &self.weight, dy.sample(i), &mut dcols, false);
            self.col2im(&dcols, h, w, dx.sample_mut(i));
        }
        Some(dx)
    }
}

// ------------------------------------------------------------- batchnorm

#[derive(Clone, Debug)]
pub struct BatchNorm<T> {
    pub channels: usize,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running: ChannelStats<T>,
    pub gamma_slot: usize,
    pub beta_slot: usize,
    /// Position of this layer among all BN layers of the model.
    pub index: usize,
}

pub struct BnCache<T> {
    x: Tensor<T>,
    mode: BnMode,
    batch: Option<ChannelStats<T>>,
}

impl<T> BnCache<T> {
    pub fn batch_stats(&self) -> Option<&ChannelStats<T>> {
        self.batch.as_ref()
    }
}

/// Upstream gradient of a loss with respect to one layer's batch statistics.
#[derive(Clone, Debug)]
pub struct StatGrad<T> {
    pub mean: Vec<T>,
    pub std: Vec<T>,
}

/// Mean and `sqrt(biased variance + eps)` per channel of an `N x C x H x W` tensor.
pub fn channel_stats<T: Scalar>(x: &Tensor<T>) -> ChannelStats<T> {
    let [n, c, h, w] = shape4(x);
    let hw = h * w;
    let m = T::of((n * hw) as f64);
    let data = x.data();
    let mut mean = vec![T::zero(); c];
    let mut std = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for i in 0..n {
            let off = (i * c + ch) * hw;
            s += data[off..off + hw].iter().copied().sum::<T>();
        }
        let mu = s / m;
        let mut v = T::zero();
        for i in 0..n {
            let off = (i * c + ch) * hw;
            for &e in &data[off..off + hw] {
                v += (e - mu) * (e - mu);
            }
        }
        mean[ch] = mu;
        std[ch] = (v / m + T::of(BN_EPS)).sqrt();
    }
    ChannelStats { mean, std }
}

impl<T: Scalar> BatchNorm<T> {
    pub(crate) fn new(channels: usize, index: usize, slots: &mut SlotCounter) -> Self {
        BatchNorm {
            channels,
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running: ChannelStats::identity(channels),
            gamma_slot: slots.next(),
            beta_slot: slots.next(),
            index,
        }
    }

    pub fn forward(&self, x: Tensor<T>, mode: BnMode) -> (Tensor<T>, BnCache<T>) {
        let [n, c, h, w] = shape4(&x);
        assert_eq!(c, self.channels, "bn channels");
        let hw = h * w;
        let batch = mode.records_stats().then(|| channel_stats(&x));
        let (mean, std) = match (mode, &batch) {
            (BnMode::Train, Some(b)) => (&b.mean, &b.std),
            _ => (&self.running.mean, &self.running.std),
        };
        let mut y = Tensor::zeros(&[n, c, h, w]);
        {
            let src = x.data();
            let dst = y.data_mut();
            for i in 0..n {
                for ch in 0..c {
                    let off = (i * c + ch) * hw;
                    let scale = self.gamma[ch] / std[ch];
                    let shift = self.beta[ch] - mean[ch] * scale;
                    for (d, &s) in dst[off..off + hw].iter_mut().zip(&src[off..off + hw]) {
                        *d = s * scale + shift;
                    }
                }
            }
        }
        (y, BnCache { x, mode, batch })
    }

    pub fn backward(
        &self,
        cache: &BnCache<T>,
        dy: &Tensor<T>,
        stat_grad: Option<&StatGrad<T>>,
        param_grads: Option<(&mut [T], &mut [T])>,
    ) -> Tensor<T> {
        let [n, c, h, w] = shape4(&cache.x);
        let hw = h * w;
        let m = T::of((n * hw) as f64);
        let x = cache.x.data();
        let g = dy.data();
        let (norm_mean, norm_std) = match (cache.mode, &cache.batch) {
            (BnMode::Train, Some(b)) => (&b.mean, &b.std),
            _ => (&self.running.mean, &self.running.std),
        };
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        let mut dx = Tensor::zeros(&[n, c, h, w]);
        let out = dx.data_mut();
        for ch in 0..c {
            let (mu, sd) = (norm_mean[ch], norm_std[ch]);
            let mut sum_g = T::zero();
            let mut sum_gx = T::zero();
            for i in 0..n {
                let off = (i * c + ch) * hw;
                for j in off..off + hw {
                    let xhat = (x[j] - mu) / sd;
                    sum_g += g[j];
                    sum_gx += g[j] * xhat;
                }
            }
            dgamma[ch] = sum_gx;
            dbeta[ch] = sum_g;
            let gamma = self.gamma[ch];
            match cache.mode {
                BnMode::Train => {
                    let mg = sum_g / m;
                    let mgx = sum_gx / m;
                    for i in 0..n {
                        let off = (i * c + ch) * hw;
                        for j in off..off + hw {
                            let xhat = (x[j] - mu) / sd;
                            out[j] = gamma * (g[j] - mg - xhat * mgx) / sd;
                        }
                    }
                }
                BnMode::Eval | BnMode::Capture => {
                    let k = gamma / sd;
                    for i in 0..n {
                        let off = (i * c + ch) * hw;
                        for j in off..off + hw {
                            out[j] = g[j] * k;
                        }
                    }
                }
            }
            if let (Some(sg), Some(b)) = (stat_grad, &cache.batch) {
                let (bmu, bsd) = (b.mean[ch], b.std[ch]);
                let gm = sg.mean[ch] / m;
                let gs = sg.std[ch] / m;
                for i in 0..n {
                    let off = (i * c + ch) * hw;
                    for j in off..off + hw {
                        out[j] += gm + gs * (x[j] - bmu) / bsd;
                    }
                }
            }
        }
        if let Some((dg, db)) = param_grads {
            for ch in 0..c {
                dg[ch] += dgamma[ch];
                db[ch] += dbeta[ch];
            }
        }
        dx
    }

    /// Exponential moving average update of the running statistics.
    pub fn absorb(&mut self, batch: &ChannelStats<T>, momentum: T) {
        let keep = T::one() - momentum;
        for ch in 0..self.channels {
            self.running.mean[ch] = keep * self.running.mean[ch] + momentum * batch.mean[ch];
            self.running.std[ch] = keep * self.running.std[ch] + momentum * batch.std[ch];
        }
    }
}

// ---------------------------------------------------------------- linear

#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub input: usize,
    pub output: usize,
    /// `output x input`
    pub weight: Vec<T>,
    pub bias: Vec<T>,
    pub weight_slot: usize,
    pub bias_slot: usize,
}

impl<T: Scalar> Linear<T> {
    pub(crate) fn new(input: usize, output: usize, rng: &mut impl Rng, slots: &mut SlotCounter) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let u = Uniform::new(-bound, bound).expect("valid bounds");
        let weight = (0..input * output).map(|_| T::of(u.sample(rng))).collect();
        let bias = (0..output).map(|_| T::of(u.sample(rng))).collect();
        Linear { input, output, weight, bias, weight_slot: slots.next(), bias_slot: slots.next() }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let n = x.dim(0);
        assert_eq!(x.sample_len(), self.input, "linear input width");
        let mut y = Tensor::zeros(&[n, self.output]);
        for i in 0..n {
            y.sample_mut(i).copy_from_slice(&self.bias);
        }
        matmul_nt(n, self.input, self.output, x.data(), &self.weight, y.data_mut(), true);
        y
    }

    pub fn backward(&self, x: &Tensor<T>, dy: &Tensor<T>, grads: Option<(&mut [T], &mut [T])>) -> Tensor<T> {
        let n = x.dim(0);
        if let Some((dw, db)) = grads {
            matmul_tn(self.output, n, self.input, dy.data(), x.data(), dw, true);
            for i in 0..n {
                for (b, &g) in db.iter_mut().zip(dy.sample(i)) {
                    *b += g;
                }
            }
        }
        let mut dx = Tensor::zeros(&[n, self.input]);
        matmul(n, self.output, self.input, dy.data(), &self.weight, dx.data_mut(), false);
        dx
    }
}

// ---------------------------------------------------------- elementwise

pub fn relu<T: Scalar>(mut x: Tensor<T>) -> Tensor<T> {
    for v in x.data_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
    x
}

/// Backward of ReLU given its forward output.
pub fn relu_backward<T: Scalar>(y: &Tensor<T>, mut dy: Tensor<T>) -> Tensor<T> {
    for (g, &o) in dy.data_mut().iter_mut().zip(y.data()) {
        if o <= T::zero() {
            *g = T::zero();
        }
    }
    dy
}

pub fn avg_pool2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = shape4(x);
    let (ho, wo) = (h / 2, w / 2);
    let mut y = Tensor::zeros(&[n, c, ho, wo]);
    let quarter = T::of(0.25);
    let src = x.data();
    let dst = y.data_mut();
    for p in 0..n * c {
        for oy in 0..ho {
            for ox in 0..wo {
                let b = p * h * w + 2 * oy * w + 2 * ox;
                dst[(p * ho + oy) * wo + ox] = (src[b] + src[b + 1] + src[b + w] + src[b + w + 1]) * quarter;
            }
        }
    }
    y
}

pub fn avg_pool2_backward<T: Scalar>(in_shape: [usize; 4], dy: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = in_shape;
    let (ho, wo) = (h / 2, w / 2);
    let mut dx = Tensor::zeros(&in_shape);
    let quarter = T::of(0.25);
    let g = dy.data();
    let out = dx.data_mut();
    for p in 0..n * c {
        for oy in 0..ho {
            for ox in 0..wo {
                let v = g[(p * ho + oy) * wo + ox] * quarter;
                let b = p * h * w + 2 * oy * w + 2 * ox;
                out[b] += v;
                out[b + 1] += v;
                out[b + w] += v;
                out[b + w + 1] += v;
            }
        }
    }
    dx
}

/// 3x3 max pool, stride 2, padding 1. Returns output and flat argmax indices.
pub fn max_pool3<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, Vec<usize>) {
    let [n, c, h, w] = shape4(x);
    let (ho, wo) = ((h + 2 - 3) / 2 + 1, (w + 2 - 3) / 2 + 1);
    let mut y = Tensor::zeros(&[n, c, ho, wo]);
    let mut arg = vec![0usize; n * c * ho * wo];
    let src = x.data();
    let dst = y.data_mut();
    for p in 0..n * c {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = T::neg_infinity();
                let mut at = 0;
                for ky in 0..3 {
                    let iy = (oy * 2 + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let ix = (ox * 2 + kx) as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let j = p * h * w + iy as usize * w + ix as usize;
                        if src[j] > best {
                            best = src[j];
                            at = j;
                        }
                    }
                }
                let o = (p * ho + oy) * wo + ox;
                dst[o] = best;
                arg[o] = at;
            }
        }
    }
    (y, arg)
}

pub fn max_pool3_backward<T: Scalar>(in_shape: [usize; 4], arg: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(&in_shape);
    let out = dx.data_mut();
    for (&j, &g) in arg.iter().zip(dy.data()) {
        out[j] += g;
    }
    dx
}

pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = shape4(x);
    let inv = T::one() / T::of((h * w) as f64);
    let data = (0..n * c).map(|p| x.data()[p * h * w..(p + 1) * h * w].iter().copied().sum::<T>() * inv).collect();
    Tensor::from_vec(&[n, c], data).expect("pool shape")
}

pub fn global_avg_pool_backward<T: Scalar>(in_shape: [usize; 4], dy: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = in_shape;
    let inv = T::one() / T::of((h * w) as f64);
    let mut dx = Tensor::zeros(&in_shape);
    for (p, &g) in dy.data().iter().enumerate().take(n * c) {
        dx.data_mut()[p * h * w..(p + 1) * h * w].fill(g * inv);
    }
    dx
}

pub(crate) fn shape4<T: Scalar>(x: &Tensor<T>) -> [usize; 4] {
    let s = x.shape();
    assert_eq!(s.len(), 4, "expected N x C x H x W, got {:?}", s);
    [s[0], s[1], s[2], s[3]]
}
