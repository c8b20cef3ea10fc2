//! First-order optimizers over slot-indexed parameter buffers, plus the
//! cosine learning-rate schedule.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "lowercase", deny_unknown_fields)]
pub enum OptimizerKind {
    /// L2 weight decay folded into the gradient.
    Adam { beta1: f64, beta2: f64 },
    /// Decoupled weight decay.
    AdamW { beta1: f64, beta2: f64 },
    Sgd { momentum: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Cosine,
}

/// Cosine decay from `peak` at step 0 to 0 at step `total - 1`.
pub fn cosine_lr(peak: f64, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return peak;
    }
    let t = step.min(total - 1) as f64 / (total - 1) as f64;
    0.5 * peak * (1.0 + (PI * t).cos())
}

#[derive(Clone, Debug, Default)]
struct SlotState<T> {
    m: Vec<T>,
    v: Vec<T>,
    steps: u64,
}

/// Optimizer with independent state (and step count) per slot, so callers may
/// update only the slots touched by the current minibatch.
#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    kind: OptimizerKind,
    weight_decay: f64,
    eps: f64,
    state: Vec<SlotState<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, weight_decay: f64) -> Self {
        Optimizer { kind, weight_decay, eps: 1e-8, state: Vec::new() }
    }

    pub fn step(&mut self, slot: usize, params: &mut [T], grads: &[T], lr: f64) {
        assert_eq!(params.len(), grads.len(), "parameter and gradient sizes differ");
        if self.state.len() <= slot {
            self.state.resize_with(slot + 1, SlotState::default);
        }
        let st = &mut self.state[slot];
        if st.m.len() != params.len() {
            st.m = vec![T::zero(); params.len()];
            st.v = vec![T::zero(); params.len()];
        }
        st.steps += 1;
        let lr_t = T::of(lr);
        let wd = T::of(self.weight_decay);
        match self.kind {
            OptimizerKind::Adam { beta1, beta2 } | OptimizerKind::AdamW { beta1, beta2 } => {
                let decoupled = matches!(self.kind, OptimizerKind::AdamW { .. });
                let (b1, b2) = (T::of(beta1), T::of(beta2));
                let c1 = T::of(1.0 - beta1.powi(st.steps as i32));
                let c2 = T::of(1.0 - beta2.powi(st.steps as i32));
                let eps = T::of(self.eps);
                for i in 0..params.len() {
                    let mut g = grads[i];
                    if decoupled {
                        params[i] -= lr_t * wd * params[i];
                    } else {
                        g += wd * params[i];
                    }
                    st.m[i] = b1 * st.m[i] + (T::one() - b1) * g;
                    st.v[i] = b2 * st.v[i] + (T::one() - b2) * g * g;
                    let mhat = st.m[i] / c1;
                    let vhat = st.v[i] / c2;
                    params[i] -= lr_t * mhat / (vhat.sqrt() + eps);
                }
            }
            OptimizerKind::Sgd { momentum } => {
                let mu = T::of(momentum);
                for i in 0..params.len() {
                    let g = grads[i] + wd * params[i];
                    st.m[i] = if st.steps == 1 { g } else { mu * st.m[i] + g };
                    params[i] -= lr_t * st.m[i];
                }
            }
        }
    }
}
