//! Random-resized-crop and horizontal flip as linear maps with an exact
//! adjoint, so gradients on augmented views reach the underlying pixels.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    /// Random resized crop on/off.
    pub random_resized_crop: bool,
    /// Crop area as a fraction of the image.
    pub scale: (f64, f64),
    /// Crop aspect ratio range (width / height).
    pub ratio: (f64, f64),
    pub horizontal_flip: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { random_resized_crop: true, scale: (0.08, 1.0), ratio: (3.0 / 4.0, 4.0 / 3.0), horizontal_flip: true }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        AugmentConfig { random_resized_crop: false, horizontal_flip: false, ..Default::default() }
    }

    pub fn is_identity(&self) -> bool {
        !self.random_resized_crop && !self.horizontal_flip
    }
}

/// Crop box in source pixels, resized back to full resolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct View {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
    pub flip: bool,
}

impl View {
    pub fn identity(h: usize, w: usize) -> Self {
        View { top: 0, left: 0, height: h, width: w, flip: false }
    }
}

/// Draws a view. Consumes a fixed pattern of random numbers for a given
/// config so sequences are reproducible from the seed.
pub fn sample_view(rng: &mut impl Rng, h: usize, w: usize, cfg: &AugmentConfig) -> View {
    let mut view = View::identity(h, w);
    if cfg.random_resized_crop {
        let area = (h * w) as f64;
        let (lr0, lr1) = (cfg.ratio.0.ln(), cfg.ratio.1.ln());
        let mut found = false;
        for _ in 0..10 {
            let target = area * rng.random_range(cfg.scale.0..=cfg.scale.1);
            let ratio = if lr1 > lr0 { rng.random_range(lr0..lr1).exp() } else { lr0.exp() };
            let cw = (target * ratio).sqrt().round() as usize;
            let ch = (target / ratio).sqrt().round() as usize;
            if cw >= 1 && ch >= 1 && cw <= w && ch <= h {
                let top = rng.random_range(0..=h - ch);
                let left = rng.random_range(0..=w - cw);
                view = View { top, left, height: ch, width: cw, flip: false };
                found = true;
                break;
            }
        }
        if !found {
            // Central crop at the clamped aspect ratio.
            let r = w as f64 / h as f64;
            let (ch, cw) = if r < cfg.ratio.0 {
                ((w as f64 / cfg.ratio.0).round() as usize, w)
            } else if r > cfg.ratio.1 {
                (h, (h as f64 * cfg.ratio.1).round() as usize)
            } else {
                (h, w)
            };
            view = View { top: (h - ch) / 2, left: (w - cw) / 2, height: ch, width: cw, flip: false };
        }
    }
    if cfg.horizontal_flip {
        view.flip = rng.random_bool(0.5);
    }
    view
}

struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

/// Bilinear (half-pixel centers) sampling positions along one axis.
fn taps(start: usize, len: usize, out: usize) -> Vec<Tap> {
    (0..out)
        .map(|o| {
            let s = ((o as f64 + 0.5) * len as f64 / out as f64 - 0.5).clamp(0.0, (len - 1) as f64);
            let lo = s.floor() as usize;
            let hi = (lo + 1).min(len - 1);
            Tap { lo: start + lo, hi: start + hi, frac: s - lo as f64 }
        })
        .collect()
}

fn for_each_weight(view: &View, h: usize, w: usize, mut f: impl FnMut(usize, usize, f64)) {
    let ty = taps(view.top, view.height, h);
    let tx = taps(view.left, view.width, w);
    for (oy, y) in ty.iter().enumerate() {
        for ox in 0..w {
            let x = &tx[if view.flip { w - 1 - ox } else { ox }];
            let o = oy * w + ox;
            let wy = [(y.lo, 1.0 - y.frac), (y.hi, y.frac)];
            let wx = [(x.lo, 1.0 - x.frac), (x.hi, x.frac)];
            for &(sy, ay) in &wy {
                for &(sx, ax) in &wx {
                    let a = ay * ax;
                    if a != 0.0 {
                        f(o, sy * w + sx, a);
                    }
                }
            }
        }
    }
}

/// Applies one view per sample of an `N x C x H x W` batch.
pub fn augment_batch<T: Scalar>(batch: &Tensor<T>, views: &[View]) -> Tensor<T> {
    let s = batch.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    assert_eq!(views.len(), n, "one view per sample");
    let mut out = Tensor::zeros(s);
    for (i, view) in views.iter().enumerate() {
        if *view == View::identity(h, w) {
            out.sample_mut(i).copy_from_slice(batch.sample(i));
            continue;
        }
        let src = batch.sample(i).to_vec();
        let dst = out.sample_mut(i);
        for_each_weight(view, h, w, |o, p, a| {
            let a = T::of(a);
            for ch in 0..c {
                dst[ch * h * w + o] += a * src[ch * h * w + p];
            }
        });
    }
    out
}

/// Adjoint of [`augment_batch`]: maps view gradients back to source pixels.
pub fn augment_batch_backward<T: Scalar>(grad: &Tensor<T>, views: &[View]) -> Tensor<T> {
    let s = grad.shape();
    let (c, h, w) = (s[1], s[2], s[3]);
    let mut out = Tensor::zeros(s);
    for (i, view) in views.iter().enumerate() {
        if *view == View::identity(h, w) {
            out.sample_mut(i).copy_from_slice(grad.sample(i));
            continue;
        }
        let g = grad.sample(i).to_vec();
        let dst = out.sample_mut(i);
        for_each_weight(view, h, w, |o, p, a| {
            let a = T::of(a);
            for ch in 0..c {
                dst[ch * h * w + p] += a * g[ch * h * w + o];
            }
        });
    }
    out
}
