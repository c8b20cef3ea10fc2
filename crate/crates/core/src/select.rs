//! Curriculum feedback evaluation: classify the remaining pool with the
//! teacher and the previous student, then draw class-balanced seeds.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledImageSet;
use crate::error::{Error, Result};
use crate::nets::{BnMode, Model};
use crate::scalar::Scalar;

/// Eval-mode inference chunk; results do not depend on it.
const INFER_BATCH: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct SelectionPool {
    /// Sorted unconsumed dataset indices.
    pub remaining: Vec<usize>,
    pub labels: Vec<usize>,
    /// Teacher correct (membership in R), aligned with `remaining`.
    pub teacher_correct: Vec<bool>,
    /// Student correct, aligned with `remaining`; `None` before any student exists.
    pub student_correct: Option<Vec<bool>>,
    pub class_count: usize,
}

/// Preference tier of a drawn seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Tier {
    /// Teacher-correct and student-wrong (teacher-correct when no student).
    Preferred = 1,
    /// Teacher-correct, student-correct.
    TeacherOnly = 2,
    /// Any remaining index of the class.
    Any = 3,
}

impl From<Tier> for u8 {
    fn from(t: Tier) -> u8 {
        t as u8
    }
}

impl TryFrom<u8> for Tier {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, String> {
        match v {
            1 => Ok(Tier::Preferred),
            2 => Ok(Tier::TeacherOnly),
            3 => Ok(Tier::Any),
            _ => Err(format!("tier {v} not in 1..=3")),
        }
    }
}

/// One line of the selection audit log.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedAudit {
    pub curriculum: usize,
    pub class: usize,
    pub tier: Tier,
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeedDraw {
    /// Class to drawn dataset indices, in draw order.
    pub per_class: BTreeMap<usize, Vec<usize>>,
    pub audit: Vec<SeedAudit>,
}

impl SeedDraw {
    /// `(index, label)` pairs, class-major.
    pub fn flatten(&self) -> Vec<(usize, usize)> {
        self.per_class.iter().flat_map(|(&c, v)| v.iter().map(move |&i| (i, c))).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.per_class.values().all(|v| v.is_empty())
    }
}

fn predictions<T: Scalar>(model: &Model<T>, ds: &LabeledImageSet, indices: &[usize]) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(INFER_BATCH) {
        out.extend(model.forward(&ds.batch::<T>(chunk), BnMode::Eval)?.argmax_rows());
    }
    Ok(out)
}

/// Labels `remaining` with teacher (and student) correctness using eval-mode forwards.
pub fn classify_pool<T: Scalar>(
    teacher: &Model<T>,
    student: Option<&Model<T>>,
    ds: &LabeledImageSet,
    remaining: &[usize],
) -> Result<SelectionPool> {
    let remaining: Vec<usize> = remaining.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    if let Some(&bad) = remaining.iter().find(|&&i| i >= ds.len()) {
        return Err(Error::Shape(format!("pool index {bad} outside dataset of {}", ds.len())));
    }
    let labels = ds.labels_of(&remaining);
    let correct = |pred: Vec<usize>| pred.iter().zip(&labels).map(|(p, y)| p == y).collect::<Vec<bool>>();
    let teacher_correct = correct(predictions(teacher, ds, &remaining)?);
    let student_correct = match student {
        Some(s) => Some(correct(predictions(s, ds, &remaining)?)),
        None => None,
    };
    Ok(SelectionPool { remaining, labels, teacher_correct, student_correct, class_count: ds.class_count })
}

impl SelectionPool {
    pub fn tier_of(&self, k: usize) -> Tier {
        match (self.teacher_correct[k], self.student_correct.as_ref().map(|s| s[k])) {
            (true, None) | (true, Some(false)) => Tier::Preferred,
            (true, Some(true)) => Tier::TeacherOnly,
            (false, _) => Tier::Any,
        }
    }

    /// Positions into `remaining` per class and tier.
    fn tiers(&self) -> BTreeMap<usize, [Vec<usize>; 3]> {
        let mut out: BTreeMap<usize, [Vec<usize>; 3]> = BTreeMap::new();
        for k in 0..self.remaining.len() {
            out.entry(self.labels[k]).or_default()[self.tier_of(k) as usize - 1].push(self.remaining[k]);
        }
        out
    }

    /// Indices of `R ∩ W` (or `R` without a student).
    pub fn preferred(&self) -> Vec<usize> {
        (0..self.remaining.len()).filter(|&k| self.tier_of(k) == Tier::Preferred).map(|k| self.remaining[k]).collect()
    }

    fn consume(&mut self, taken: &BTreeSet<usize>) {
        let keep: Vec<usize> = (0..self.remaining.len()).filter(|&k| !taken.contains(&self.remaining[k])).collect();
        self.remaining = keep.iter().map(|&k| self.remaining[k]).collect();
        self.labels = keep.iter().map(|&k| self.labels[k]).collect();
        self.teacher_correct = keep.iter().map(|&k| self.teacher_correct[k]).collect();
        if let Some(s) = &self.student_correct {
            self.student_correct = Some(keep.iter().map(|&k| s[k]).collect());
        }
    }
}

/// Draws `sizes[c]` seeds per class without replacement, exhausting each
/// tier before the next. Drawn indices leave `pool.remaining`.
pub fn sample_seeds(pool: &mut SelectionPool, sizes: &[usize], curriculum: usize, rng_seed: u64) -> Result<SeedDraw> {
    if sizes.len() != pool.class_count {
        return Err(Error::Config(format!("{} per-class sizes for {} classes", sizes.len(), pool.class_count)));
    }
    let tiers = pool.tiers();
    for (c, &need) in sizes.iter().enumerate() {
        let available = tiers.get(&c).map_or(0, |t| t.iter().map(Vec::len).sum());
        if available < need {
            return Err(Error::InsufficientData { class: c, needed: need, available });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut per_class = BTreeMap::new();
    let mut audit = Vec::new();
    let mut taken = BTreeSet::new();
    for (c, &need) in sizes.iter().enumerate() {
        let mut chosen = Vec::with_capacity(need);
        if let Some(class_tiers) = tiers.get(&c) {
            for (t, members) in class_tiers.iter().enumerate() {
                if chosen.len() == need {
                    break;
                }
                let mut members = members.clone();
                members.shuffle(&mut rng);
                let tier = Tier::try_from(t as u8 + 1).expect("three tiers");
                for idx in members.into_iter().take(need - chosen.len()) {
                    audit.push(SeedAudit { curriculum, class: c, tier, index: idx });
                    chosen.push(idx);
                }
            }
        }
        taken.extend(chosen.iter().copied());
        per_class.insert(c, chosen);
    }
    pool.consume(&taken);
    Ok(SeedDraw { per_class, audit })
}
