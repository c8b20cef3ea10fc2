//! Classifier architectures with BN-statistic instrumentation.

mod checkpoint;
pub mod layers;
mod model;

pub use checkpoint::CHECKPOINT_VERSION;
pub use layers::{channel_stats, BnMode, ChannelStats, StatGrad, BN_EPS};
pub use model::{build_model, Arch, Backprop, Model, ModelCheckpoint, Normalization, ParamGrads, Trace};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-BN-layer batch statistics of one input batch.
pub type BatchStats<T> = Vec<ChannelStats<T>>;

/// Forward with running-stat normalization while recording each BN layer's
/// input batch statistics.
pub fn forward_with_bn_capture<T: Scalar>(model: &Model<T>, batch: &Tensor<T>) -> Result<(Tensor<T>, BatchStats<T>)> {
    let trace = model.forward_trace(batch, BnMode::Capture)?;
    let stats = trace.batch_stats().expect("capture records every BN layer");
    Ok((trace.logits, stats))
}

/// Row-wise softmax with max subtraction.
pub fn softmax_probs<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    if logits.data().iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("NaN logit".into()));
    }
    let k = logits.dim(1);
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(k) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Ok(out)
}

/// Row-wise log-softmax.
pub fn log_softmax<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let k = logits.dim(1);
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(k) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}
