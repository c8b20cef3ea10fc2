//! Run directory bookkeeping: resolved config, metrics stream and the
//! top-level manifest naming every artifact a command wrote.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use cudd::config::RunConfig;
use cudd::io::{create_dir, read_json, write_json, JsonLines};
use cudd::Result;
use serde::{Deserialize, Serialize};

pub const RESOLVED_CONFIG: &str = "resolved_config.json";
pub const METRICS: &str = "metrics.jsonl";
pub const MANIFEST: &str = "manifest.json";
pub const TEACHER: &str = "teacher.ckpt";

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Manifest {
    /// Relative path to the command that produced it.
    pub artifacts: BTreeMap<String, String>,
}

pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    pub fn open(path: &Path) -> Result<Self> {
        create_dir(path)?;
        Ok(RunDir { path: path.to_path_buf() })
    }

    pub fn join(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn previous_config(&self) -> Result<Option<RunConfig>> {
        let p = self.join(RESOLVED_CONFIG);
        if p.exists() {
            read_json(&p).map(Some)
        } else {
            Ok(None)
        }
    }

    pub fn write_config(&self, cfg: &RunConfig, command: &str) -> Result<()> {
        write_json(&self.join(RESOLVED_CONFIG), cfg)?;
        self.record(&[RESOLVED_CONFIG, METRICS], command)
    }

    pub fn metrics(&self) -> Result<JsonLines> {
        JsonLines::append(&self.join(METRICS))
    }

    /// Registers artifacts (paths relative to the run directory).
    pub fn record(&self, names: &[&str], command: &str) -> Result<()> {
        let path = self.join(MANIFEST);
        let mut m: Manifest = if path.exists() { read_json(&path)? } else { Manifest::default() };
        for n in names {
            m.artifacts.insert((*n).to_string(), command.to_string());
        }
        write_json(&path, &m)
    }

    pub fn has_curricula(&self) -> bool {
        fs::read_dir(&self.path)
            .map(|rd| rd.flatten().any(|e| e.file_name().to_string_lossy().starts_with("curriculum_")))
            .unwrap_or(false)
    }
}
