use std::path::{Path, PathBuf};

use cudd::config::RunConfig;
use cudd::curriculum::run_distillation;
use cudd::data::{load_dataset, Split};
use cudd::evaluate::{class_partition, continual_eval, evaluate_synthetic, export_features, random_real_baseline};
use cudd::io::write_json;
use cudd::train::{evaluate_model, train_teacher};
use cudd::{load_synthetic, Error, LabeledImageSet, Model32, Result, SyntheticDataset};
use serde::Serialize;

use crate::resolve::{resolve, Overrides};
use crate::rundir::{RunDir, TEACHER};
use crate::{Command, Common};

const PLAN: &str = "plan.json";
const FINAL: &str = "final";
const RESULTS: &str = "results.json";
const BASELINE_RESULTS: &str = "results_random_real.json";
const CONTINUAL: &str = "continual.json";

pub fn run(cmd: &Command, common: &Common) -> Result<()> {
    if common.device != "cpu" {
        return Err(Error::Config(format!("device: `{}` is not available, only cpu is supported", common.device)));
    }
    match cmd {
        Command::Squeeze { arch } => squeeze(common, arch.as_deref()),
        Command::Distill { arch, teacher, resume } => distill(common, arch.as_deref(), teacher.as_deref(), *resume),
        Command::Eval { synthetic, random_real, archs, seeds, teacher } => {
            eval(common, synthetic.as_deref(), *random_real, archs.clone(), *seeds, teacher.as_deref())
        }
        Command::Continual { synthetic, arch, steps, teacher } => {
            continual(common, synthetic.as_deref(), arch.as_deref(), *steps, teacher.as_deref())
        }
        Command::ExportFeatures { checkpoint, synthetic, split, out_dir } => {
            features(common, checkpoint.as_deref(), synthetic.as_deref(), *split, out_dir.as_deref())
        }
    }
}

fn overrides(common: &Common) -> Overrides {
    Overrides { dataset: common.dataset.clone(), ipc: common.ipc, seed: common.seed, ..Overrides::default() }
}

fn open_run(common: &Common, cfg: &RunConfig, command: &str) -> Result<RunDir> {
    let path = common
        .run_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(format!("{}-ipc{}-seed{}", cfg.dataset, cfg.ipc, cfg.seed)));
    let run = RunDir::open(&path)?;
    run.write_config(cfg, command)?;
    Ok(run)
}

fn data(common: &Common, cfg: &RunConfig, split: Split) -> Result<LabeledImageSet> {
    let root = common.data_root.clone().unwrap_or_else(|| PathBuf::from("."));
    load_dataset(&cfg.dataset, split, &root)
}

fn load_teacher(run: &RunDir, explicit: Option<&Path>, cfg: &RunConfig) -> Result<Model32> {
    let path = explicit.map_or_else(|| run.join(TEACHER), Path::to_path_buf);
    if !path.is_file() {
        return Err(Error::Config(format!(
            "teacher checkpoint {} not found; run `distill squeeze` or pass --teacher",
            path.display()
        )));
    }
    let teacher = Model32::load(&path)?;
    if teacher.arch_id() != cfg.teacher_arch {
        eprintln!("note: teacher checkpoint is {}, config names {}", teacher.arch_id(), cfg.teacher_arch);
    }
    Ok(teacher)
}

fn load_sds(run: &RunDir, explicit: Option<&Path>) -> Result<SyntheticDataset> {
    load_synthetic(&explicit.map_or_else(|| run.join(FINAL), Path::to_path_buf))
}

fn squeeze(common: &Common, arch: Option<&str>) -> Result<()> {
    let cfg = resolve(common.config.as_ref(), &Overrides { teacher_arch: arch.map(String::from), ..overrides(common) })?;
    let run = open_run(common, &cfg, "squeeze")?;
    let train = data(common, &cfg, Split::Train)?;
    let val = data(common, &cfg, Split::Val)?;
    let teacher: Model32 = train_teacher(&train, &cfg.teacher_arch, &cfg.squeeze, Some(&val), &mut run.metrics()?)?;
    teacher.save(&run.join(TEACHER))?;
    run.record(&[TEACHER], "squeeze")?;
    println!(
        "teacher {} saved to {} (train {:.4}, val {:.4})",
        cfg.teacher_arch,
        run.join(TEACHER).display(),
        evaluate_model(&teacher, &train)?,
        evaluate_model(&teacher, &val)?
    );
    Ok(())
}

fn distill(common: &Common, arch: Option<&str>, teacher: Option<&Path>, resume: bool) -> Result<()> {
    let arch = arch.map(String::from);
    let o = Overrides { teacher_arch: arch.clone(), student_arch: arch, ..overrides(common) };
    let cfg = resolve(common.config.as_ref(), &o)?;
    let plan = cfg.plan()?;
    let path = common
        .run_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(format!("{}-ipc{}-seed{}", cfg.dataset, cfg.ipc, cfg.seed)));
    let existing = RunDir::open(&path)?;
    if existing.has_curricula() {
        if !resume {
            return Err(Error::Config(format!("{} already holds curricula; pass --resume to continue", path.display())));
        }
        if let Some(prev) = existing.previous_config()? {
            if prev.distill_config() != cfg.distill_config() || prev.teacher_arch != cfg.teacher_arch {
                return Err(Error::Config(format!(
                    "{} was produced with a different distillation config",
                    path.display()
                )));
            }
        }
    }
    let run = open_run(common, &cfg, "distill")?;
    if !run.join(PLAN).exists() {
        write_json(&run.join(PLAN), &plan)?;
    }
    run.record(&[PLAN], "distill")?;
    println!("plan: J={} cum_sizes={:?}", plan.num_curricula(), plan.cum_sizes());
    let teacher = load_teacher(&run, teacher, &cfg)?;
    let train = data(common, &cfg, Split::Train)?;
    let out = run_distillation(&train, &teacher, &plan, &cfg.distill_config(), Some(&run.path))?;
    let mut names: Vec<String> = (1..=plan.num_curricula()).map(|j| format!("curriculum_{j}")).collect();
    names.push(FINAL.into());
    run.record(&names.iter().map(String::as_str).collect::<Vec<_>>(), "distill")?;
    println!(
        "synthetic set of {} images written to {} ({} curricula resumed, sha256 {})",
        out.dataset.len(),
        run.join(FINAL).display(),
        out.resumed,
        out.dataset.image_hash()
    );
    Ok(())
}

/// Evaluation commands may take dataset and IPC from the synthetic set.
fn eval_overrides(common: &Common, sds: Option<&SyntheticDataset>) -> Overrides {
    let mut o = overrides(common);
    if let Some(s) = sds {
        o.dataset = o.dataset.or_else(|| Some(s.dataset_id.clone()));
        o.ipc = o.ipc.or(Some(s.ipc));
    }
    o
}

fn eval(
    common: &Common,
    synthetic: Option<&Path>,
    random_real: bool,
    archs: Option<Vec<String>>,
    seeds: Option<usize>,
    teacher: Option<&Path>,
) -> Result<()> {
    let sds = synthetic.map(load_synthetic).transpose()?;
    let o = Overrides { eval_archs: archs, eval_seeds: seeds, ..eval_overrides(common, sds.as_ref()) };
    let cfg = resolve(common.config.as_ref(), &o)?;
    let run = open_run(common, &cfg, "eval")?;
    let teacher = load_teacher(&run, teacher, &cfg)?;
    let val = data(common, &cfg, Split::Val)?;
    let (sds, out) = if random_real {
        (random_real_baseline(&data(common, &cfg, Split::Train)?, cfg.ipc, cfg.seed)?, BASELINE_RESULTS)
    } else {
        (match sds {
            Some(s) => s,
            None => load_sds(&run, None)?,
        }, RESULTS)
    };
    let archs: Vec<&str> = cfg.eval_archs.iter().map(String::as_str).collect();
    let results = evaluate_synthetic(&sds, &teacher, &archs, &val, &cfg.evaluation, cfg.eval_seeds, &mut run.metrics()?)?;
    write_json(&run.join(out), &results)?;
    run.record(&[out], "eval")?;
    for r in &results {
        println!("{} ipc {} {}: {:.2} +- {:.2}", r.dataset, r.ipc, r.arch, 100.0 * r.mean, 100.0 * r.std);
    }
    Ok(())
}

#[derive(Serialize)]
struct ContinualStep {
    step: usize,
    classes: Vec<usize>,
    accuracy: f64,
}

fn continual(
    common: &Common,
    synthetic: Option<&Path>,
    arch: Option<&str>,
    steps: Option<usize>,
    teacher: Option<&Path>,
) -> Result<()> {
    let sds = synthetic.map(load_synthetic).transpose()?;
    let o = Overrides { continual_steps: steps, ..eval_overrides(common, sds.as_ref()) };
    let cfg = resolve(common.config.as_ref(), &o)?;
    let run = open_run(common, &cfg, "continual")?;
    let teacher = load_teacher(&run, teacher, &cfg)?;
    let val = data(common, &cfg, Split::Val)?;
    let sds = match sds {
        Some(s) => s,
        None => load_sds(&run, None)?,
    };
    let arch = arch.map(String::from).unwrap_or_else(|| cfg.eval_archs[0].clone());
    let n = cfg.continual_steps;
    let acc = continual_eval(&sds, &teacher, &val, &arch, n, &cfg.evaluation, cfg.seed, &mut run.metrics()?)?;
    let mut seen = Vec::new();
    let mut steps = Vec::with_capacity(n);
    for (t, (group, accuracy)) in class_partition(sds.class_count, n, cfg.seed).into_iter().zip(acc).enumerate() {
        seen.extend(group);
        seen.sort_unstable();
        println!("step {}: {} classes, accuracy {:.2}", t + 1, seen.len(), 100.0 * accuracy);
        steps.push(ContinualStep { step: t + 1, classes: seen.clone(), accuracy });
    }
    write_json(&run.join(CONTINUAL), &steps)?;
    run.record(&[CONTINUAL], "continual")
}

fn features(
    common: &Common,
    checkpoint: Option<&Path>,
    synthetic: Option<&Path>,
    split: Split,
    out_dir: Option<&Path>,
) -> Result<()> {
    let sds = synthetic.map(load_synthetic).transpose()?;
    let cfg = resolve(common.config.as_ref(), &eval_overrides(common, sds.as_ref()))?;
    let run = open_run(common, &cfg, "export-features")?;
    let model = load_teacher(&run, checkpoint, &cfg)?;
    let (images, labels) = match &sds {
        Some(s) => (s.images(), s.labels()),
        None => {
            let ds = data(common, &cfg, split)?;
            (ds.images, ds.labels)
        }
    };
    let dir = out_dir.map_or_else(|| run.join("features"), Path::to_path_buf);
    let (bin, side) = export_features(&model, &images, &labels, &dir)?;
    if let Ok(rel) = dir.strip_prefix(&run.path) {
        run.record(&[&rel.to_string_lossy()], "export-features")?;
    }
    println!("{} x {} features written to {}, labels in {}", labels.len(), model.feature_dim(), bin.display(), side.display());
    Ok(())
}
