//! Flat config-file form of the stage configs. Keys mirror the rows of a
//! hyperparameter table (optimizer, momentum, weight decay, lr schedule,
//! augmentation, learning rate, batch size, iteration/epoch).

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::curriculum::{CurriculumPlan, DistillConfig, Schedule};
use crate::nets::Arch;
use crate::error::{Error, Result};
use crate::optim::{LrSchedule, OptimizerKind};
use crate::recover::{AdvNorm, Batching, GateMode, RegSpace, SynthesisConfig};
use crate::train::{LabelMode, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Momentum {
    Betas([f64; 2]),
    Single(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerName {
    Adam,
    Adamw,
    Sgd,
}

fn split_optimizer(kind: OptimizerKind) -> (OptimizerName, Momentum) {
    match kind {
        OptimizerKind::Adam { beta1, beta2 } => (OptimizerName::Adam, Momentum::Betas([beta1, beta2])),
        OptimizerKind::AdamW { beta1, beta2 } => (OptimizerName::Adamw, Momentum::Betas([beta1, beta2])),
        OptimizerKind::Sgd { momentum } => (OptimizerName::Sgd, Momentum::Single(momentum)),
    }
}

fn join_optimizer(name: OptimizerName, momentum: Momentum) -> Result<OptimizerKind> {
    match (name, momentum) {
        (OptimizerName::Adam, Momentum::Betas([beta1, beta2])) => Ok(OptimizerKind::Adam { beta1, beta2 }),
        (OptimizerName::Adamw, Momentum::Betas([beta1, beta2])) => Ok(OptimizerKind::AdamW { beta1, beta2 }),
        (OptimizerName::Sgd, Momentum::Single(momentum)) => Ok(OptimizerKind::Sgd { momentum }),
        (OptimizerName::Sgd, _) => Err(Error::Config("momentum: sgd takes a single number".into())),
        _ => Err(Error::Config("momentum: adam and adamw take [beta1, beta2]".into())),
    }
}

const CROP: &str = "random_resized_crop";
const FLIP: &str = "horizontal_flip";

fn augmentation_name(a: &AugmentConfig) -> String {
    match (a.random_resized_crop, a.horizontal_flip) {
        (true, true) => format!("{CROP}+{FLIP}"),
        (true, false) => CROP.into(),
        (false, true) => FLIP.into(),
        (false, false) => "none".into(),
    }
}

fn parse_augmentation(name: &str, crop_scale: [f64; 2]) -> Result<AugmentConfig> {
    let mut a = AugmentConfig { scale: (crop_scale[0], crop_scale[1]), ..AugmentConfig::none() };
    if name != "none" {
        for part in name.split('+') {
            match part {
                CROP => a.random_resized_crop = true,
                FLIP => a.horizontal_flip = true,
                other => {
                    return Err(Error::Config(format!(
                        "augmentation: unknown transform `{other}` (use {CROP}, {FLIP}, joined by +, or none)"
                    )))
                }
            }
        }
    }
    if !(0.0 < crop_scale[0] && crop_scale[0] <= crop_scale[1] && crop_scale[1] <= 1.0) {
        return Err(Error::Config(format!("crop_scale: need 0 < min <= max <= 1, got {crop_scale:?}")));
    }
    Ok(a)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct SynthesisFile {
    optimizer: OptimizerName,
    momentum: Momentum,
    weight_decay: f64,
    lr_schedule: LrSchedule,
    augmentation: String,
    #[serde(default = "default_scale")]
    crop_scale: [f64; 2],
    alpha_adv: f64,
    alpha_reg: f64,
    lambda_bn: f64,
    reg_space: RegSpace,
    learning_rate: f64,
    batch_size: usize,
    iteration: usize,
    adv_norm: AdvNorm,
    gate: GateMode,
    batching: Batching,
    #[serde(default)]
    rng_seed: u64,
}

fn default_scale() -> [f64; 2] {
    let s = AugmentConfig::default().scale;
    [s.0, s.1]
}

impl From<SynthesisConfig> for SynthesisFile {
    fn from(c: SynthesisConfig) -> Self {
        let (optimizer, momentum) = split_optimizer(c.optimizer);
        SynthesisFile {
            optimizer,
            momentum,
            weight_decay: c.weight_decay,
            lr_schedule: c.lr_schedule,
            augmentation: augmentation_name(&c.augmentation),
            crop_scale: [c.augmentation.scale.0, c.augmentation.scale.1],
            alpha_adv: c.alpha_adv,
            alpha_reg: c.alpha_reg,
            lambda_bn: c.lambda_bn,
            reg_space: c.reg_space,
            learning_rate: c.learning_rate,
            batch_size: c.batch_size,
            iteration: c.iterations,
            adv_norm: c.adv_norm,
            gate: c.gate,
            batching: c.batching,
            rng_seed: c.rng_seed,
        }
    }
}

impl TryFrom<SynthesisFile> for SynthesisConfig {
    type Error = Error;

    fn try_from(f: SynthesisFile) -> Result<Self> {
        Ok(SynthesisConfig {
            alpha_reg: f.alpha_reg,
            alpha_adv: f.alpha_adv,
            lambda_bn: f.lambda_bn,
            reg_space: f.reg_space,
            optimizer: join_optimizer(f.optimizer, f.momentum)?,
            learning_rate: f.learning_rate,
            weight_decay: f.weight_decay,
            lr_schedule: f.lr_schedule,
            iterations: f.iteration,
            batch_size: f.batch_size,
            augmentation: parse_augmentation(&f.augmentation, f.crop_scale)?,
            adv_norm: f.adv_norm,
            gate: f.gate,
            batching: f.batching,
            rng_seed: f.rng_seed,
        })
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct TrainFile {
    optimizer: OptimizerName,
    momentum: Momentum,
    learning_rate: f64,
    weight_decay: f64,
    lr_schedule: LrSchedule,
    augmentation: String,
    #[serde(default = "default_scale")]
    crop_scale: [f64; 2],
    batch_size: usize,
    epoch: usize,
    label_mode: LabelMode,
    #[serde(default = "default_bn_momentum")]
    bn_momentum: f64,
    #[serde(default)]
    warm_start_full_epochs: bool,
    #[serde(default)]
    rng_seed: u64,
}

fn default_bn_momentum() -> f64 {
    0.1
}

impl From<TrainConfig> for TrainFile {
    fn from(c: TrainConfig) -> Self {
        let (optimizer, momentum) = split_optimizer(c.optimizer);
        TrainFile {
            optimizer,
            momentum,
            learning_rate: c.learning_rate,
            weight_decay: c.weight_decay,
            lr_schedule: c.lr_schedule,
            augmentation: augmentation_name(&c.augmentation),
            crop_scale: [c.augmentation.scale.0, c.augmentation.scale.1],
            batch_size: c.batch_size,
            epoch: c.epochs,
            label_mode: c.label_mode,
            bn_momentum: c.bn_momentum,
            warm_start_full_epochs: c.warm_start_full_epochs,
            rng_seed: c.rng_seed,
        }
    }
}

impl TryFrom<TrainFile> for TrainConfig {
    type Error = Error;

    fn try_from(f: TrainFile) -> Result<Self> {
        Ok(TrainConfig {
            optimizer: join_optimizer(f.optimizer, f.momentum)?,
            learning_rate: f.learning_rate,
            weight_decay: f.weight_decay,
            lr_schedule: f.lr_schedule,
            epochs: f.epoch,
            batch_size: f.batch_size,
            augmentation: parse_augmentation(&f.augmentation, f.crop_scale)?,
            label_mode: f.label_mode,
            rng_seed: f.rng_seed,
            bn_momentum: f.bn_momentum,
            warm_start_full_epochs: f.warm_start_full_epochs,
        })
    }
}

/// Every setting of a run, as persisted in `resolved_config.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: String,
    pub ipc: usize,
    pub seed: u64,
    pub teacher_arch: String,
    pub student_arch: String,
    pub eval_archs: Vec<String>,
    pub eval_seeds: usize,
    pub continual_steps: usize,
    pub schedule: Schedule,
    /// Curriculum count for the uniform schedule.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub curricula: Option<usize>,
    /// Cumulative per-class sizes for the custom schedule.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cum_sizes: Option<Vec<usize>>,
    pub warm_start: bool,
    pub store_soft_labels: bool,
    pub squeeze: TrainConfig,
    pub synthesis: SynthesisConfig,
    pub student: TrainConfig,
    pub evaluation: TrainConfig,
}

const PRESETS: [(&str, &str); 3] = [
    ("cifar10", include_str!("../presets/cifar10.json")),
    ("cifar100", include_str!("../presets/cifar100.json")),
    ("toy2", include_str!("../presets/toy2.json")),
];

pub fn preset_names() -> Vec<&'static str> {
    PRESETS.iter().map(|p| p.0).collect()
}

/// Raw JSON of a bundled preset.
pub fn preset_json(dataset: &str) -> Result<&'static str> {
    PRESETS.iter().find(|p| p.0 == dataset).map(|p| p.1).ok_or_else(|| {
        Error::Config(format!("no preset for dataset `{dataset}` (known: {})", preset_names().join(", ")))
    })
}

pub fn preset(dataset: &str) -> Result<RunConfig> {
    serde_json::from_str(preset_json(dataset)?).map_err(|e| Error::Config(format!("preset {dataset}: {e}")))
}

impl RunConfig {
    pub fn plan(&self) -> Result<CurriculumPlan> {
        match self.schedule {
            Schedule::Logarithmic => CurriculumPlan::logarithmic(self.ipc),
            Schedule::Uniform => {
                let j = self.curricula.ok_or_else(|| Error::Config("curricula: required by the uniform schedule".into()))?;
                CurriculumPlan::uniform(self.ipc, j)
            }
            Schedule::Custom => {
                let cum = self.cum_sizes.clone().ok_or_else(|| Error::Config("cum_sizes: required by the custom schedule".into()))?;
                CurriculumPlan::from_cumulative(self.ipc, cum, Schedule::Custom)
            }
        }
    }

    /// Sets the root seed of every stage.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.squeeze.rng_seed = seed;
        self.synthesis.rng_seed = seed;
        self.student.rng_seed = seed;
        self.evaluation.rng_seed = seed;
        self
    }

    pub fn distill_config(&self) -> DistillConfig {
        DistillConfig {
            synthesis: self.synthesis.clone(),
            student: self.student.clone(),
            student_arch: self.student_arch.clone(),
            warm_start: self.warm_start,
            store_soft_labels: self.store_soft_labels,
            rng_seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let field = |name: &str, e: Error| match e {
            Error::Config(msg) => Error::Config(format!("{name}: {msg}")),
            other => Error::Config(format!("{name}: {other}")),
        };
        self.squeeze.validate().map_err(|e| field("squeeze", e))?;
        self.synthesis.validate().map_err(|e| field("synthesis", e))?;
        self.student.validate().map_err(|e| field("student", e))?;
        self.evaluation.validate().map_err(|e| field("evaluation", e))?;
        self.plan().map_err(|e| field("ipc/schedule", e))?;
        for arch in std::iter::once(&self.teacher_arch).chain(&self.eval_archs).chain(std::iter::once(&self.student_arch)) {
            arch.parse::<Arch>().map_err(|e| field("arch", e))?;
        }
        if self.eval_seeds < 1 {
            return Err(Error::Config("eval_seeds: must be at least 1".into()));
        }
        Ok(())
    }
}
