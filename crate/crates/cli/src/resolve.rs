//! Config resolution: bundled preset, then the user's file, then flags.

use std::fs;
use std::path::{Path, PathBuf};

use cudd::config::{preset_json, RunConfig};
use cudd::{Error, Result};
use serde_json::Value;

/// Overrides shared by every subcommand.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub dataset: Option<String>,
    pub ipc: Option<usize>,
    pub seed: Option<u64>,
    pub teacher_arch: Option<String>,
    pub student_arch: Option<String>,
    pub eval_archs: Option<Vec<String>>,
    pub eval_seeds: Option<usize>,
    pub continual_steps: Option<usize>,
}

/// Recursively overlays `top` on `base`; objects merge, everything else replaces.
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn read_config_file(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let v: Value = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    if !v.is_object() {
        return Err(Error::Config(format!("{}: expected a JSON object", path.display())));
    }
    Ok(v)
}

pub fn resolve(config: Option<&PathBuf>, o: &Overrides) -> Result<RunConfig> {
    let file = config.map(|p| read_config_file(p)).transpose()?;
    let dataset = o
        .dataset
        .clone()
        .or_else(|| file.as_ref().and_then(|f| f.get("dataset")).and_then(Value::as_str).map(String::from))
        .ok_or_else(|| Error::Config("dataset: pass --dataset or set it in the config file".into()))?;
    let mut merged: Value = serde_json::from_str(preset_json(&dataset)?).expect("bundled presets are valid JSON");
    if let Some(f) = file {
        merge(&mut merged, f);
    }
    merged["dataset"] = Value::String(dataset);
    let mut cfg: RunConfig = serde_json::from_value(merged).map_err(|e| {
        let origin = config.map_or_else(|| "config".to_string(), |p| p.display().to_string());
        Error::Config(format!("{origin}: {e}"))
    })?;
    if let Some(ipc) = o.ipc {
        cfg.ipc = ipc;
    }
    if let Some(a) = &o.teacher_arch {
        cfg.teacher_arch = a.clone();
    }
    if let Some(a) = &o.student_arch {
        cfg.student_arch = a.clone();
    }
    if let Some(a) = &o.eval_archs {
        cfg.eval_archs = a.clone();
    }
    if let Some(n) = o.eval_seeds {
        cfg.eval_seeds = n;
    }
    if let Some(n) = o.continual_steps {
        cfg.continual_steps = n;
    }
    if let Some(seed) = o.seed {
        cfg = cfg.with_seed(seed);
    }
    cfg.validate()?;
    Ok(cfg)
}
