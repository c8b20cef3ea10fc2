//! The curriculum loop: select seeds, synthesize the subset, train the next
//! student on the cumulative union, and checkpoint every stage.

mod plan;

pub use plan::{curriculum_count, plan_curricula, CurriculumPlan, Schedule, BASE_SIZE};

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_synthetic, save_synthetic, LabeledImageSet, SyntheticDataset, SyntheticRecord};
use crate::error::{Error, Result};
use crate::io::{create_dir, read_json, write_json, JsonLines};
use crate::nets::{softmax_probs, BnMode, Model};
use crate::recover::{synthesize_subset, SeedImages, SynthesisConfig};
use crate::select::{classify_pool, sample_seeds, SeedDraw};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::{records_tensor, train_student_on, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    pub synthesis: SynthesisConfig,
    /// Student training between curricula.
    pub student: TrainConfig,
    pub student_arch: String,
    /// Initialize each student from the previous one.
    pub warm_start: bool,
    /// Store teacher soft labels next to the final images.
    pub store_soft_labels: bool,
    /// Root seed; per-curriculum seeds are derived from it.
    pub rng_seed: u64,
}

/// Everything a distillation run produces.
#[derive(Clone, Debug)]
pub struct DistillOutput<T> {
    pub dataset: SyntheticDataset,
    /// Student after each curriculum, `students[j - 1]` for curriculum `j`.
    pub students: Vec<Model<T>>,
    /// Curricula loaded from disk instead of recomputed.
    pub resumed: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct DoneMarker {
    curriculum: usize,
    images_sha256: String,
    student_checkpoint: String,
    discardable: Vec<String>,
}

const PLAN_FILE: &str = "plan.json";
const METRICS_FILE: &str = "metrics.jsonl";
const SEEDS_FILE: &str = "seeds.jsonl";
const TRACE_FILE: &str = "loss_trace.jsonl";
const SUBSET_DIR: &str = "subset";
const STUDENT_FILE: &str = "student.ckpt";
const DONE_FILE: &str = "done.json";

/// Per-stage seed of curriculum `j`: `(root, j, salt)` mixed by SplitMix64.
pub fn derive_seed(root: u64, j: usize, salt: u64) -> u64 {
    let mut z = root ^ (j as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const SALT_SELECT: u64 = 1;
const SALT_SYNTH: u64 = 2;
const SALT_STUDENT: u64 = 3;

pub fn curriculum_dir(run_dir: &Path, j: usize) -> PathBuf {
    run_dir.join(format!("curriculum_{j}"))
}

/// Runs every curriculum of `plan`. With `run_dir` each stage is persisted
/// and completed curricula found there are loaded instead of recomputed.
pub fn run_distillation<T: Scalar>(
    ds: &LabeledImageSet,
    teacher: &Model<T>,
    plan: &CurriculumPlan,
    cfg: &DistillConfig,
    run_dir: Option<&Path>,
) -> Result<DistillOutput<T>> {
    ds.validate(true)?;
    cfg.synthesis.validate()?;
    cfg.student.validate()?;
    if teacher.class_count() != ds.class_count || teacher.input_shape() != ds.image_shape() {
        return Err(Error::Config(format!(
            "teacher expects {} classes of {:?}, dataset has {} of {:?}",
            teacher.class_count(),
            teacher.input_shape(),
            ds.class_count,
            ds.image_shape()
        )));
    }
    let mut metrics = match run_dir {
        Some(dir) => {
            create_dir(dir)?;
            check_plan(dir, plan)?;
            JsonLines::append(&dir.join(METRICS_FILE))?
        }
        None => JsonLines::discard(),
    };
    let classes = ds.class_count;
    let mut records: Vec<SyntheticRecord> = Vec::new();
    let mut consumed: BTreeSet<usize> = BTreeSet::new();
    let mut students: Vec<Model<T>> = Vec::new();
    let mut resumed = 0;
    for j in 1..=plan.num_curricula() {
        let dir = run_dir.map(|d| curriculum_dir(d, j));
        if let Some(d) = dir.as_deref() {
            if let Some((subset, student)) = load_completed::<T>(d, j).map_err(|e| e.in_curriculum(j))? {
                consumed.extend(subset.iter().filter_map(|r| r.seed_index));
                records.extend(subset);
                students.push(student);
                resumed += 1;
                continue;
            }
        }
        let (subset, student) = run_curriculum(ds, teacher, plan, cfg, j, &records, &consumed, students.last(), dir.as_deref(), &mut metrics)
            .map_err(|e| e.in_curriculum(j))?;
        consumed.extend(subset.iter().filter_map(|r| r.seed_index));
        records.extend(subset);
        students.push(student);
    }
    let soft_labels = if cfg.store_soft_labels { Some(teacher_soft_labels(teacher, &records)?) } else { None };
    let dataset = SyntheticDataset {
        dataset_id: ds.name.clone(),
        ipc: plan.ipc(),
        class_count: classes,
        image_shape: ds.image_shape(),
        curricula: plan.clone(),
        records,
        soft_labels,
    };
    dataset.validate()?;
    if let Some(dir) = run_dir {
        save_synthetic(&dataset, &dir.join("final"))?;
    }
    metrics.flush()?;
    Ok(DistillOutput { dataset, students, resumed })
}

fn check_plan(dir: &Path, plan: &CurriculumPlan) -> Result<()> {
    let path = dir.join(PLAN_FILE);
    if path.exists() {
        let existing: CurriculumPlan = read_json(&path)?;
        if &existing != plan {
            return Err(Error::Config(format!("{} holds a different curriculum plan", path.display())));
        }
        Ok(())
    } else {
        write_json(&path, plan)
    }
}

fn load_completed<T: Scalar>(dir: &Path, j: usize) -> Result<Option<(Vec<SyntheticRecord>, Model<T>)>> {
    let marker = dir.join(DONE_FILE);
    if !marker.exists() {
        return Ok(None);
    }
    let done: DoneMarker = read_json(&marker)?;
    if done.curriculum != j {
        return Err(Error::Format(format!("{} belongs to curriculum {}", marker.display(), done.curriculum)));
    }
    let subset = load_synthetic(&dir.join(SUBSET_DIR))?;
    if subset.image_hash() != done.images_sha256 {
        return Err(Error::Corruption(format!("{} does not match its done marker", dir.display())));
    }
    let student = Model::load(&dir.join(&done.student_checkpoint))?;
    Ok(Some((subset.records, student)))
}

#[allow(clippy::too_many_arguments)]
fn run_curriculum<T: Scalar>(
    ds: &LabeledImageSet,
    teacher: &Model<T>,
    plan: &CurriculumPlan,
    cfg: &DistillConfig,
    j: usize,
    previous: &[SyntheticRecord],
    consumed: &BTreeSet<usize>,
    student_prev: Option<&Model<T>>,
    dir: Option<&Path>,
    metrics: &mut JsonLines,
) -> Result<(Vec<SyntheticRecord>, Model<T>)> {
    if let Some(d) = dir {
        // A partial curriculum is redone from scratch.
        if d.exists() {
            fs::remove_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        create_dir(d)?;
    }
    let sink = |name: &str| match dir {
        Some(d) => JsonLines::create(&d.join(name)),
        None => Ok(JsonLines::discard()),
    };

    // Feedback evaluation and seed sampling.
    let remaining: Vec<usize> = (0..ds.len()).filter(|i| !consumed.contains(i)).collect();
    let mut pool = classify_pool(teacher, student_prev, ds, &remaining)?;
    let sizes = vec![plan.subset_size(j); ds.class_count];
    let draw = sample_seeds(&mut pool, &sizes, j, derive_seed(cfg.rng_seed, j, SALT_SELECT))?;
    let mut audit = sink(SEEDS_FILE)?;
    for a in &draw.audit {
        audit.write(a)?;
    }
    audit.flush()?;

    let seeds = seed_images(ds, &draw)?;
    let synth_cfg = SynthesisConfig { rng_seed: derive_seed(cfg.rng_seed, j, SALT_SYNTH), ..cfg.synthesis.clone() };
    let mut trace = sink(TRACE_FILE)?;
    let subset = synthesize_subset(teacher, student_prev, &seeds, j, &synth_cfg, &mut trace)?.records;

    let mut cumulative = previous.to_vec();
    cumulative.extend(subset.iter().cloned());
    let student_cfg = TrainConfig { rng_seed: derive_seed(cfg.rng_seed, j, SALT_STUDENT), ..cfg.student.clone() };
    let init = if cfg.warm_start { student_prev } else { None };
    let stage = format!("student_{j}");
    let student = train_student_on(&cumulative, teacher, init, &cfg.student_arch, &student_cfg, &stage, None, metrics)?;
    // Later curricula see the student exactly as a resumed run would load it.
    let student = Model::from_bytes(&student.to_bytes())?;

    if let Some(d) = dir {
        let subset_ds = SyntheticDataset {
            dataset_id: ds.name.clone(),
            ipc: plan.subset_size(j),
            class_count: ds.class_count,
            image_shape: ds.image_shape(),
            curricula: plan.clone(),
            records: subset.clone(),
            soft_labels: None,
        };
        save_synthetic(&subset_ds, &d.join(SUBSET_DIR))?;
        student.save(&d.join(STUDENT_FILE))?;
        let done = DoneMarker {
            curriculum: j,
            images_sha256: subset_ds.image_hash(),
            student_checkpoint: STUDENT_FILE.into(),
            discardable: vec![STUDENT_FILE.into()],
        };
        write_json(&d.join(DONE_FILE), &done)?;
    }
    Ok((subset, student))
}

fn seed_images(ds: &LabeledImageSet, draw: &SeedDraw) -> Result<SeedImages> {
    let pairs = draw.flatten();
    let indices: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let images = if indices.is_empty() { Tensor::zeros(&[0, 0, 0, 0]) } else { ds.images.select(&indices) };
    Ok(SeedImages { images, labels: pairs.iter().map(|p| p.1).collect(), seed_indices: indices.into_iter().map(Some).collect() })
}

/// Teacher softmax (eval mode) on every record.
pub fn teacher_soft_labels<T: Scalar>(teacher: &Model<T>, records: &[SyntheticRecord]) -> Result<Vec<Vec<f32>>> {
    let mut out = Vec::with_capacity(records.len());
    for chunk in records.chunks(128) {
        let (images, _) = records_tensor(chunk, teacher.input_shape())?;
        let probs = softmax_probs(&teacher.forward(&images.cast::<T>(), BnMode::Eval)?)?;
        out.extend(probs.data().chunks(teacher.class_count()).map(|r| r.iter().map(|v| v.as_f64() as f32).collect()));
    }
    Ok(out)
}
