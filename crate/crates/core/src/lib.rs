//! Curriculum dataset distillation.
//!
//! A teacher trained on the original data drives a sequence of curricula.
//! Each curriculum selects seed images the teacher classifies correctly but
//! the previous student does not, refines them under a prediction and
//! BN-statistic matching objective with a seed anchor and a teacher-gated
//! adversarial term, and trains the next student on everything synthesized
//! so far. The `evaluate` module measures how well fresh networks learn from
//! the result.
//!
//! Numerical code is generic over [`Scalar`] (`f32` or `f64`); aliases such
//! as [`Model32`] fix the precision.

pub mod augment;
pub mod batching;
pub mod config;
pub mod curriculum;
pub mod data;
pub mod error;
pub mod evaluate;
pub mod io;
pub mod nets;
pub mod optim;
pub mod recover;
pub mod scalar;
pub mod select;
pub mod tensor;
pub mod train;

pub use curriculum::{plan_curricula, run_distillation, CurriculumPlan, DistillConfig, DistillOutput};
pub use data::{load_dataset, load_synthetic, save_synthetic, LabeledImageSet, SyntheticDataset, SyntheticRecord};
pub use error::{Error, Result};
pub use nets::{build_model, Model, ModelCheckpoint};
pub use recover::{synthesize_subset, SynthesisConfig};
pub use scalar::Scalar;
pub use tensor::Tensor;
pub use train::{evaluate_model, train_student, train_teacher, TrainConfig};

pub type Model32 = Model<f32>;
pub type Model64 = Model<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type ParamGrads32 = nets::ParamGrads<f32>;
pub type ParamGrads64 = nets::ParamGrads<f64>;
pub type DistillOutput32 = DistillOutput<f32>;
pub type DistillOutput64 = DistillOutput<f64>;
