use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::layers::*;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Supported classifier families.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arch {
    /// `depth` blocks of conv3x3 -> BN -> ReLU -> avgpool2, then a linear head
    /// on the flattened map.
    ConvNet { depth: usize, width: usize },
    /// ResNet-18 with BasicBlocks. `cifar_stem` swaps the 7x7/stride-2 stem and
    /// max pool for a single 3x3 conv.
    ResNet18 { cifar_stem: bool, width: usize },
}

impl Arch {
    pub const CONVNET_WIDTH: usize = 128;
    pub const RESNET_WIDTH: usize = 64;
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Arch::ConvNet { depth, width } => {
                write!(f, "convnet-{depth}")?;
                if width != Arch::CONVNET_WIDTH {
                    write!(f, "-w{width}")?;
                }
            }
            Arch::ResNet18 { cifar_stem, width } => {
                write!(f, "resnet18")?;
                if cifar_stem {
                    write!(f, "-cifar")?;
                }
                if width != Arch::RESNET_WIDTH {
                    write!(f, "-w{width}")?;
                }
            }
        }
        Ok(())
    }
}

impl FromStr for Arch {
    type Err = Error;

    /// Parses `convnet-D[-wW]`, `resnet18[-cifar][-wW]`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::UnsupportedArch(s.to_string());
        let (base, width) = match s.rsplit_once("-w") {
            Some((b, w)) if !w.is_empty() && w.bytes().all(|c| c.is_ascii_digit()) => {
                (b, Some(w.parse::<usize>().map_err(|_| bad())?))
            }
            _ => (s, None),
        };
        if width == Some(0) {
            return Err(bad());
        }
        if let Some(d) = base.strip_prefix("convnet-") {
            let depth: usize = d.parse().map_err(|_| bad())?;
            if !(1..=4).contains(&depth) {
                return Err(bad());
            }
            return Ok(Arch::ConvNet { depth, width: width.unwrap_or(Arch::CONVNET_WIDTH) });
        }
        let cifar_stem = match base {
            "resnet18" => false,
            "resnet18-cifar" => true,
            _ => return Err(bad()),
        };
        Ok(Arch::ResNet18 { cifar_stem, width: width.unwrap_or(Arch::RESNET_WIDTH) })
    }
}

/// Per-channel affine map applied to raw `[0,1]` pixels before the first layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Normalization { mean: vec![0.0; channels], std: vec![1.0; channels] }
    }
}

#[derive(Clone, Debug)]
pub struct BasicBlock<T> {
    pub conv1: Conv2d<T>,
    pub bn1: BatchNorm<T>,
    pub conv2: Conv2d<T>,
    pub bn2: BatchNorm<T>,
    pub down: Option<(Conv2d<T>, BatchNorm<T>)>,
}

#[derive(Clone, Debug)]
pub enum Layer<T> {
    Conv(Conv2d<T>),
    Bn(BatchNorm<T>),
    Relu,
    AvgPool2,
    MaxPool3,
    Block(Box<BasicBlock<T>>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Readout {
    Flatten,
    GlobalAvg,
}

/// Trained or freshly initialized classifier: architecture, parameters and
/// BN running statistics. Serialized as a checkpoint file.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub(crate) arch: Arch,
    pub(crate) class_count: usize,
    pub(crate) input_shape: [usize; 3],
    pub(crate) normalization: Normalization,
    pub(crate) body: Vec<Layer<T>>,
    readout: Readout,
    pub(crate) head: Linear<T>,
    slot_count: usize,
    bn_count: usize,
    pub train_meta: serde_json::Value,
}

pub type ModelCheckpoint<T> = Model<T>;

enum LayerCache<T> {
    Conv(ConvCache<T>),
    Bn(BnCache<T>),
    Relu(Tensor<T>),
    Avg([usize; 4]),
    Max([usize; 4], Vec<usize>),
    Block(Box<BlockCache<T>>),
}

struct BlockCache<T> {
    c1: ConvCache<T>,
    b1: BnCache<T>,
    r1: Tensor<T>,
    c2: ConvCache<T>,
    b2: BnCache<T>,
    down: Option<(ConvCache<T>, BnCache<T>)>,
    out: Tensor<T>,
}

/// Everything a forward pass retains for backpropagation.
pub struct Trace<T> {
    input_shape: [usize; 4],
    caches: Vec<LayerCache<T>>,
    readout_in: [usize; 4],
    pub features: Tensor<T>,
    pub logits: Tensor<T>,
    stats: Vec<Option<ChannelStats<T>>>,
}

impl<T: Scalar> Trace<T> {
    /// Batch statistics of every BN layer, if the pass recorded them.
    pub fn batch_stats(&self) -> Option<Vec<ChannelStats<T>>> {
        self.stats.iter().cloned().collect()
    }
}

/// Upstream gradients fed into [`Model::backward`].
#[derive(Default)]
pub struct Backprop<'a, T> {
    pub logits: Option<&'a Tensor<T>>,
    pub features: Option<&'a Tensor<T>>,
    pub stats: Option<&'a [StatGrad<T>]>,
}

/// Gradient buffers, one per parameter slot.
#[derive(Clone, Debug)]
pub struct ParamGrads<T> {
    pub slots: Vec<Vec<T>>,
}

impl<T: Scalar> ParamGrads<T> {
    pub fn zero(&mut self) {
        for s in &mut self.slots {
            s.fill(T::zero());
        }
    }

    fn pair(&mut self, first: usize) -> (&mut [T], &mut [T]) {
        let (a, b) = self.slots.split_at_mut(first + 1);
        (&mut a[first], &mut b[0])
    }

    pub fn all_finite(&self) -> bool {
        self.slots.iter().flatten().all(|v| v.is_finite())
    }
}

pub fn build_model<T: Scalar>(
    arch_id: &str,
    class_count: usize,
    input_shape: [usize; 3],
    rng_seed: u64,
) -> Result<Model<T>> {
    let arch: Arch = arch_id.parse()?;
    Model::new(arch, class_count, input_shape, rng_seed)
}

impl<T: Scalar> Model<T> {
    pub fn new(arch: Arch, class_count: usize, input_shape: [usize; 3], rng_seed: u64) -> Result<Self> {
        if class_count < 2 {
            return Err(Error::Config(format!("class_count must be at least 2, got {class_count}")));
        }
        let [c, h, w] = input_shape;
        if c == 0 {
            return Err(Error::Shape("input has no channels".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let mut slots = SlotCounter(0);
        let mut bn_index = 0;
        let mut next_bn = |ch: usize, slots: &mut SlotCounter| {
            let b = BatchNorm::new(ch, bn_index, slots);
            bn_index += 1;
            b
        };
        let mut body = Vec::new();
        let (readout, feat_dim) = match arch {
            Arch::ConvNet { depth, width } => {
                let f = 1 << depth;
                if h % f != 0 || w % f != 0 || h < f || w < f {
                    return Err(Error::Shape(format!("{arch} needs spatial size divisible by {f}, got {h}x{w}")));
                }
                let mut cin = c;
                for _ in 0..depth {
                    body.push(Layer::Conv(Conv2d::new(cin, width, 3, 1, 1, &mut rng, &mut slots)));
                    body.push(Layer::Bn(next_bn(width, &mut slots)));
                    body.push(Layer::Relu);
                    body.push(Layer::AvgPool2);
                    cin = width;
                }
                (Readout::Flatten, width * (h / f) * (w / f))
            }
            Arch::ResNet18 { cifar_stem, width } => {
                let min = if cifar_stem { 8 } else { 32 };
                if h < min || w < min {
                    return Err(Error::Shape(format!("{arch} needs at least {min}x{min} input, got {h}x{w}")));
                }
                if cifar_stem {
                    body.push(Layer::Conv(Conv2d::new(c, width, 3, 1, 1, &mut rng, &mut slots)));
                } else {
                    body.push(Layer::Conv(Conv2d::new(c, width, 7, 2, 3, &mut rng, &mut slots)));
                }
                body.push(Layer::Bn(next_bn(width, &mut slots)));
                body.push(Layer::Relu);
                if !cifar_stem {
                    body.push(Layer::MaxPool3);
                }
                let mut cin = width;
                for (stage, mult) in [1usize, 2, 4, 8].into_iter().enumerate() {
                    let cout = width * mult;
                    for b in 0..2 {
                        let stride = if stage > 0 && b == 0 { 2 } else { 1 };
                        let conv1 = Conv2d::new(cin, cout, 3, stride, 1, &mut rng, &mut slots);
                        let bn1 = next_bn(cout, &mut slots);
                        let conv2 = Conv2d::new(cout, cout, 3, 1, 1, &mut rng, &mut slots);
                        let bn2 = next_bn(cout, &mut slots);
                        let down = (stride != 1 || cin != cout).then(|| {
                            let dc = Conv2d::new(cin, cout, 1, stride, 0, &mut rng, &mut slots);
                            (dc, next_bn(cout, &mut slots))
                        });
                        body.push(Layer::Block(Box::new(BasicBlock { conv1, bn1, conv2, bn2, down })));
                        cin = cout;
                    }
                }
                (Readout::GlobalAvg, cin)
            }
        };
        let head = Linear::new(feat_dim, class_count, &mut rng, &mut slots);
        let bn_count = bn_index;
        Ok(Model {
            arch,
            class_count,
            input_shape,
            normalization: Normalization::identity(c),
            body,
            readout,
            head,
            slot_count: slots.0,
            bn_count,
            train_meta: serde_json::Value::Null,
        })
    }

    pub fn arch(&self) -> Arch {
        self.arch
    }

    pub fn arch_id(&self) -> String {
        self.arch.to_string()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn feature_dim(&self) -> usize {
        self.head.input
    }

    pub fn bn_count(&self) -> usize {
        self.bn_count
    }

    pub fn normalization(&self) -> &Normalization {
        &self.normalization
    }

    pub fn set_normalization(&mut self, norm: Normalization) -> Result<()> {
        if norm.mean.len() != self.input_shape[0] || norm.std.len() != self.input_shape[0] {
            return Err(Error::Shape("normalization channel count differs from input".into()));
        }
        if norm.std.iter().any(|&s| s <= 0.0 || !s.is_finite()) {
            return Err(Error::Config("normalization std must be positive".into()));
        }
        self.normalization = norm;
        Ok(())
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let s = x.shape();
        if s.len() != 4 || s[1..] != self.input_shape {
            return Err(Error::Shape(format!("model expects N x {:?}, got {:?}", self.input_shape, s)));
        }
        if s[0] == 0 {
            return Err(Error::Shape("empty batch".into()));
        }
        Ok(())
    }

    fn normalize(&self, x: &Tensor<T>) -> Tensor<T> {
        let [n, c, h, w] = shape4(x);
        let mut y = x.clone();
        let hw = h * w;
        for i in 0..n {
            for ch in 0..c {
                let m = T::of(self.normalization.mean[ch]);
                let inv = T::of(1.0 / self.normalization.std[ch]);
                for v in &mut y.data_mut()[(i * c + ch) * hw..(i * c + ch + 1) * hw] {
                    *v = (*v - m) * inv;
                }
            }
        }
        y
    }

    /// Logits only. `Train` mode normalizes with batch statistics but leaves
    /// the running statistics untouched.
    pub fn forward(&self, x: &Tensor<T>, mode: BnMode) -> Result<Tensor<T>> {
        Ok(self.forward_trace(x, mode)?.logits)
    }

    /// Forward pass retaining caches for [`Model::backward`].
    pub fn forward_trace(&self, x: &Tensor<T>, mode: BnMode) -> Result<Trace<T>> {
        self.check_input(x)?;
        if mode.records_stats() && x.dim(0) < 2 {
            return Err(Error::Shape("batch statistics need at least 2 samples".into()));
        }
        let mut stats = vec![None; self.bn_count];
        let mut h = self.normalize(x);
        let mut caches = Vec::with_capacity(self.body.len());
        for layer in &self.body {
            let (out, cache) = match layer {
                Layer::Conv(c) => {
                    let (y, cc) = c.forward(&h);
                    (y, LayerCache::Conv(cc))
                }
                Layer::Bn(b) => {
                    let (y, bc) = b.forward(h, mode);
                    stats[b.index] = bc.batch_stats().cloned();
                    (y, LayerCache::Bn(bc))
                }
                Layer::Relu => {
                    let y = relu(h);
                    (y.clone(), LayerCache::Relu(y))
                }
                Layer::AvgPool2 => {
                    let s = shape4(&h);
                    (avg_pool2(&h), LayerCache::Avg(s))
                }
                Layer::MaxPool3 => {
                    let s = shape4(&h);
                    let (y, arg) = max_pool3(&h);
                    (y, LayerCache::Max(s, arg))
                }
                Layer::Block(b) => {
                    let (y, bc) = block_forward(b, h, mode, &mut stats);
                    (y, LayerCache::Block(Box::new(bc)))
                }
            };
            h = out;
            caches.push(cache);
        }
        let readout_in = shape4(&h);
        let features = match self.readout {
            Readout::Flatten => {
                let n = readout_in[0];
                let d = h.sample_len();
                h.reshape(&[n, d])?
            }
            Readout::GlobalAvg => global_avg_pool(&h),
        };
        let logits = self.head.forward(&features);
        Ok(Trace { input_shape: shape4(x), caches, readout_in, features, logits, stats })
    }

    /// Penultimate-layer features (eval mode).
    pub fn features(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_trace(x, BnMode::Eval)?.features)
    }

    /// Backpropagates `seeds` through a recorded pass. Accumulates parameter
    /// gradients into `grads` when given and returns the gradient with respect
    /// to the raw (unnormalized) input when `need_input` is set.
    pub fn backward(
        &self,
        trace: &Trace<T>,
        seeds: Backprop<'_, T>,
        mut grads: Option<&mut ParamGrads<T>>,
        need_input: bool,
    ) -> Option<Tensor<T>> {
        let n = trace.input_shape[0];
        let feat_shape = [n, self.head.input];
        let mut dfeat = match seeds.logits {
            Some(dl) => {
                let g = grads.as_deref_mut().map(|g| g.pair(self.head.weight_slot));
                self.head.backward(&trace.features, dl, g)
            }
            None => Tensor::zeros(&feat_shape),
        };
        if let Some(df) = seeds.features {
            dfeat.add_assign(df);
        }
        let mut dh = match self.readout {
            Readout::Flatten => dfeat.reshape(&trace.readout_in).expect("readout shape"),
            Readout::GlobalAvg => global_avg_pool_backward(trace.readout_in, &dfeat),
        };
        let stat = |idx: usize| seeds.stats.map(|s| &s[idx]);
        for (i, (layer, cache)) in self.body.iter().zip(&trace.caches).enumerate().rev() {
            let first = i == 0;
            dh = match (layer, cache) {
                (Layer::Conv(c), LayerCache::Conv(cc)) => {
                    let dw = grads.as_deref_mut().map(|g| g.slots[c.slot].as_mut_slice());
                    c.backward(cc, &dh, dw, !first || need_input)?
                }
                (Layer::Bn(b), LayerCache::Bn(bc)) => {
                    let g = grads.as_deref_mut().map(|g| g.pair(b.gamma_slot));
                    b.backward(bc, &dh, stat(b.index), g)
                }
                (Layer::Relu, LayerCache::Relu(y)) => relu_backward(y, dh),
                (Layer::AvgPool2, LayerCache::Avg(s)) => avg_pool2_backward(*s, &dh),
                (Layer::MaxPool3, LayerCache::Max(s, arg)) => max_pool3_backward(*s, arg, &dh),
                (Layer::Block(b), LayerCache::Block(bc)) => block_backward(b, bc, dh, seeds.stats, &mut grads),
                _ => unreachable!("trace does not match model"),
            };
        }
        if !need_input {
            return None;
        }
        // Chain through the input normalization.
        let [n, c, h, w] = trace.input_shape;
        for i in 0..n {
            for ch in 0..c {
                let inv = T::of(1.0 / self.normalization.std[ch]);
                for v in &mut dh.data_mut()[(i * c + ch) * h * w..(i * c + ch + 1) * h * w] {
                    *v *= inv;
                }
            }
        }
        Some(dh)
    }

    /// Folds a pass's batch statistics into the running statistics.
    pub fn absorb_batch_stats(&mut self, stats: &[ChannelStats<T>], momentum: T) {
        for bn in self.bn_layers_mut() {
            bn.absorb(&stats[bn.index], momentum);
        }
    }

    pub fn zero_grads(&self) -> ParamGrads<T> {
        let mut slots: Vec<Vec<T>> = vec![Vec::new(); self.slot_count];
        self.visit_params(&mut |slot, p| slots[slot] = vec![T::zero(); p.len()]);
        ParamGrads { slots }
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, p| n += p.len());
        n
    }

    /// Visits parameter tensors in slot order.
    pub fn visit_params(&self, f: &mut dyn FnMut(usize, &[T])) {
        fn conv<T>(c: &Conv2d<T>, f: &mut dyn FnMut(usize, &[T])) {
            f(c.slot, &c.weight);
        }
        fn bn<T>(b: &BatchNorm<T>, f: &mut dyn FnMut(usize, &[T])) {
            f(b.gamma_slot, &b.gamma);
            f(b.beta_slot, &b.beta);
        }
        for layer in &self.body {
            match layer {
                Layer::Conv(c) => conv(c, f),
                Layer::Bn(b) => bn(b, f),
                Layer::Block(b) => {
                    conv(&b.conv1, f);
                    bn(&b.bn1, f);
                    conv(&b.conv2, f);
                    bn(&b.bn2, f);
                    if let Some((c, n)) = &b.down {
                        conv(c, f);
                        bn(n, f);
                    }
                }
                _ => {}
            }
        }
        f(self.head.weight_slot, &self.head.weight);
        f(self.head.bias_slot, &self.head.bias);
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(usize, &mut [T])) {
        fn conv<T>(c: &mut Conv2d<T>, f: &mut dyn FnMut(usize, &mut [T])) {
            f(c.slot, &mut c.weight);
        }
        fn bn<T>(b: &mut BatchNorm<T>, f: &mut dyn FnMut(usize, &mut [T])) {
            f(b.gamma_slot, &mut b.gamma);
            f(b.beta_slot, &mut b.beta);
        }
        for layer in &mut self.body {
            match layer {
                Layer::Conv(c) => conv(c, f),
                Layer::Bn(b) => bn(b, f),
                Layer::Block(b) => {
                    conv(&mut b.conv1, f);
                    bn(&mut b.bn1, f);
                    conv(&mut b.conv2, f);
                    bn(&mut b.bn2, f);
                    if let Some((c, n)) = &mut b.down {
                        conv(c, f);
                        bn(n, f);
                    }
                }
                _ => {}
            }
        }
        f(self.head.weight_slot, &mut self.head.weight);
        f(self.head.bias_slot, &mut self.head.bias);
    }

    /// BN layers in index order.
    pub fn bn_layers(&self) -> Vec<&BatchNorm<T>> {
        let mut out = Vec::with_capacity(self.bn_count);
        for layer in &self.body {
            match layer {
                Layer::Bn(b) => out.push(b),
                Layer::Block(b) => {
                    out.push(&b.bn1);
                    out.push(&b.bn2);
                    if let Some((_, n)) = &b.down {
                        out.push(n);
                    }
                }
                _ => {}
            }
        }
        out.sort_by_key(|b| b.index);
        out
    }

    pub fn bn_layers_mut(&mut self) -> Vec<&mut BatchNorm<T>> {
        let mut out = Vec::with_capacity(self.bn_count);
        for layer in &mut self.body {
            match layer {
                Layer::Bn(b) => out.push(b),
                Layer::Block(b) => {
                    let BasicBlock { bn1, bn2, down, .. } = b.as_mut();
                    out.push(bn1);
                    out.push(bn2);
                    if let Some((_, n)) = down {
                        out.push(n);
                    }
                }
                _ => {}
            }
        }
        out.sort_by_key(|b| b.index);
        out
    }

    /// Running `(mean, std)` of every BN layer.
    pub fn bn_running(&self) -> Vec<ChannelStats<T>> {
        self.bn_layers().into_iter().map(|b| b.running.clone()).collect()
    }

    /// Converts parameters and running statistics to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let mut out: Model<U> = Model::new(self.arch, self.class_count, self.input_shape, 0).expect("same arch");
        let mut values: Vec<Vec<U>> = vec![Vec::new(); self.slot_count];
        self.visit_params(&mut |s, p| values[s] = p.iter().map(|&v| U::of(v.as_f64())).collect());
        out.visit_params_mut(&mut |s, p| p.copy_from_slice(&values[s]));
        let running = self.bn_running();
        for bn in out.bn_layers_mut() {
            let r = &running[bn.index];
            bn.running.mean = r.mean.iter().map(|&v| U::of(v.as_f64())).collect();
            bn.running.std = r.std.iter().map(|&v| U::of(v.as_f64())).collect();
        }
        out.normalization = self.normalization.clone();
        out.train_meta = self.train_meta.clone();
        out
    }

    /// Whether two models have identical architecture and parameter shapes.
    pub fn same_shape(&self, other: &Model<T>) -> bool {
        self.arch == other.arch && self.class_count == other.class_count && self.input_shape == other.input_shape
    }
}

fn block_forward<T: Scalar>(
    b: &BasicBlock<T>,
    x: Tensor<T>,
    mode: BnMode,
    stats: &mut [Option<ChannelStats<T>>],
) -> (Tensor<T>, BlockCache<T>) {
    let (h, c1) = b.conv1.forward(&x);
    let (h, b1) = b.bn1.forward(h, mode);
    stats[b.bn1.index] = b1.batch_stats().cloned();
    let r1 = relu(h);
    let (h, c2) = b.conv2.forward(&r1);
    let (mut h, b2) = b.bn2.forward(h, mode);
    stats[b.bn2.index] = b2.batch_stats().cloned();
    let down = match &b.down {
        Some((dc, dn)) => {
            let (s, cc) = dc.forward(&x);
            let (s, bc) = dn.forward(s, mode);
            stats[dn.index] = bc.batch_stats().cloned();
            h.add_assign(&s);
            Some((cc, bc))
        }
        None => {
            h.add_assign(&x);
            None
        }
    };
    let out = relu(h);
    (out.clone(), BlockCache { c1, b1, r1, c2, b2, down, out })
}

fn block_backward<T: Scalar>(
    b: &BasicBlock<T>,
    cache: &BlockCache<T>,
    dy: Tensor<T>,
    stats: Option<&[StatGrad<T>]>,
    grads: &mut Option<&mut ParamGrads<T>>,
) -> Tensor<T> {
    let stat = |idx: usize| stats.map(|s| &s[idx]);
    let dsum = relu_backward(&cache.out, dy);
    let mut dx = match (&b.down, &cache.down) {
        (Some((dc, dn)), Some((cc, bc))) => {
            let g = grads.as_deref_mut().map(|g| g.pair(dn.gamma_slot));
            let ds = dn.backward(bc, &dsum, stat(dn.index), g);
            let dw = grads.as_deref_mut().map(|g| g.slots[dc.slot].as_mut_slice());
            dc.backward(cc, &ds, dw, true).expect("dx requested")
        }
        _ => dsum.clone(),
    };
    let g = grads.as_deref_mut().map(|g| g.pair(b.bn2.gamma_slot));
    let d = b.bn2.backward(&cache.b2, &dsum, stat(b.bn2.index), g);
    let dw = grads.as_deref_mut().map(|g| g.slots[b.conv2.slot].as_mut_slice());
    let d = b.conv2.backward(&cache.c2, &d, dw, true).expect("dx requested");
    let d = relu_backward(&cache.r1, d);
    let g = grads.as_deref_mut().map(|g| g.pair(b.bn1.gamma_slot));
    let d = b.bn1.backward(&cache.b1, &d, stat(b.bn1.index), g);
    let dw = grads.as_deref_mut().map(|g| g.slots[b.conv1.slot].as_mut_slice());
    let d = b.conv1.backward(&cache.c1, &d, dw, true).expect("dx requested");
    dx.add_assign(&d);
    dx
}
