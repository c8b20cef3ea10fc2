use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest cumulative checkpoint of the logarithmic schedule.
pub const BASE_SIZE: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Logarithmic,
    Uniform,
    Custom,
}

/// Per-class cumulative subset sizes of each curriculum.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "PlanFile", try_from = "PlanFile")]
pub struct CurriculumPlan {
    ipc: usize,
    cum_sizes: Vec<usize>,
    schedule: Schedule,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlanFile {
    ipc: usize,
    #[serde(rename = "J")]
    j: usize,
    cum_sizes: Vec<usize>,
    subset_sizes: Vec<usize>,
    schedule: Schedule,
}

impl From<CurriculumPlan> for PlanFile {
    fn from(p: CurriculumPlan) -> Self {
        PlanFile { ipc: p.ipc, j: p.num_curricula(), subset_sizes: p.subset_sizes(), cum_sizes: p.cum_sizes, schedule: p.schedule }
    }
}

impl TryFrom<PlanFile> for CurriculumPlan {
    type Error = Error;

    fn try_from(f: PlanFile) -> Result<Self> {
        let plan = CurriculumPlan::from_cumulative(f.ipc, f.cum_sizes, f.schedule)?;
        if plan.num_curricula() != f.j || plan.subset_sizes() != f.subset_sizes {
            return Err(Error::Format("plan J or subset_sizes disagree with cum_sizes".into()));
        }
        Ok(plan)
    }
}

/// `J = max(0, floor(log2(ipc / 5))) + 1`, evaluated in integers.
pub fn curriculum_count(ipc: usize) -> usize {
    let mut j = 1;
    while BASE_SIZE << j <= ipc {
        j += 1;
    }
    j
}

impl CurriculumPlan {
    /// Doubling cumulative sizes from 5 with the last clamped to `ipc`.
    pub fn logarithmic(ipc: usize) -> Result<Self> {
        if ipc < 1 {
            return Err(Error::Config("ipc must be at least 1".into()));
        }
        let j = curriculum_count(ipc);
        let mut cum: Vec<usize> = (0..j - 1).map(|k| ipc.min(BASE_SIZE << k)).collect();
        cum.push(ipc);
        Self::from_cumulative(ipc, cum, Schedule::Logarithmic)
    }

    /// `j` curricula of (nearly) equal size; the remainder goes to the last.
    pub fn uniform(ipc: usize, j: usize) -> Result<Self> {
        if ipc < 1 || j < 1 || j > ipc {
            return Err(Error::Config(format!("uniform schedule needs 1 <= J <= ipc, got J={j}, ipc={ipc}")));
        }
        let step = ipc / j;
        let mut cum: Vec<usize> = (1..j).map(|k| k * step).collect();
        cum.push(ipc);
        Self::from_cumulative(ipc, cum, Schedule::Uniform)
    }

    pub fn from_cumulative(ipc: usize, cum_sizes: Vec<usize>, schedule: Schedule) -> Result<Self> {
        if ipc < 1 {
            return Err(Error::Config("ipc must be at least 1".into()));
        }
        if cum_sizes.last() != Some(&ipc) {
            return Err(Error::Config(format!("cum_sizes must end at ipc {ipc}")));
        }
        if cum_sizes[0] < 1 || cum_sizes.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("cum_sizes must be positive and strictly increasing".into()));
        }
        Ok(CurriculumPlan { ipc, cum_sizes, schedule })
    }

    pub fn ipc(&self) -> usize {
        self.ipc
    }

    pub fn num_curricula(&self) -> usize {
        self.cum_sizes.len()
    }

    pub fn cum_sizes(&self) -> &[usize] {
        &self.cum_sizes
    }

    pub fn schedule(&self) -> Schedule {
        self.schedule
    }

    pub fn subset_sizes(&self) -> Vec<usize> {
        let mut prev = 0;
        self.cum_sizes
            .iter()
            .map(|&c| {
                let d = c - prev;
                prev = c;
                d
            })
            .collect()
    }

    /// Per-class size of the 1-based curriculum `j`.
    pub fn subset_size(&self, j: usize) -> usize {
        self.subset_sizes()[j - 1]
    }

    /// Per-class cumulative size through 1-based curriculum `j`.
    pub fn cum_size(&self, j: usize) -> usize {
        self.cum_sizes[j - 1]
    }
}

/// Shorthand for [`CurriculumPlan::logarithmic`].
pub fn plan_curricula(ipc: usize) -> Result<CurriculumPlan> {
    CurriculumPlan::logarithmic(ipc)
}
