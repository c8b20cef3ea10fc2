//! End-to-end behaviour on the toy2 fixture.

mod common;

use std::fs;

use common::*;
use cudd::curriculum::{curriculum_dir, run_distillation};
use cudd::data::{class_indices, load_synthetic};
use cudd::evaluate::{continual_eval, evaluate_synthetic, export_features, random_real_baseline, FeatureSidecar};
use cudd::io::JsonLines;
use cudd::nets::{build_model, BnMode};
use cudd::recover::SeedImages;
use cudd::train::{evaluate_model, predict, train_teacher, MetricsRecord};
use cudd::{synthesize_subset, Error, Model32, SynthesisConfig, TrainConfig};

fn short(cfg: &TrainConfig, epochs: usize) -> TrainConfig {
    TrainConfig { epochs, ..cfg.clone() }
}

fn seeds_of_class(per_class: usize) -> SeedImages {
    let groups = class_indices(toy_train()).unwrap();
    let idx: Vec<usize> = groups.values().flat_map(|v| v[..per_class].to_vec()).collect();
    SeedImages {
        images: toy_train().images.select(&idx),
        labels: toy_train().labels_of(&idx),
        seed_indices: idx.iter().map(|&i| Some(i)).collect(),
    }
}

/// Perceptron on raw pixels; returns the epoch at which it made no mistakes.
fn perceptron_converges(ds: &cudd::LabeledImageSet, max_epochs: usize) -> Option<usize> {
    let d = ds.images.sample_len();
    let mut w = vec![0.0f64; d + 1];
    for epoch in 0..max_epochs {
        let mut mistakes = 0;
        for i in 0..ds.len() {
            let x = ds.images.sample(i);
            let y = if ds.labels[i] == 1 { 1.0 } else { -1.0 };
            let s = w[d] + x.iter().zip(&w).map(|(&a, b)| a as f64 * b).sum::<f64>();
            if y * s <= 0.0 {
                mistakes += 1;
                w[d] += y;
                w.iter_mut().zip(x).for_each(|(wk, &xk)| *wk += y * xk as f64);
            }
        }
        if mistakes == 0 {
            return Some(epoch);
        }
    }
    None
}

#[test]
fn toy2_train_split_is_linearly_separable() {
    assert!(perceptron_converges(toy_train(), 500).is_some());
}

#[test]
fn toy2_teacher_fits_the_fixture() {
    let cfg = toy_preset();
    assert!(cfg.teacher_arch.starts_with("convnet-3") && cfg.squeeze.epochs == 30);
    let teacher = toy_teacher();
    assert_eq!(evaluate_model(teacher, toy_train()).unwrap(), 1.0);
    assert!(evaluate_model(teacher, toy_val()).unwrap() >= 0.95);
}

#[test]
fn accuracy_matches_confusion_matrix() {
    let teacher = toy_teacher();
    let val = toy_val();
    let mut confusion = [[0usize; 2]; 2];
    for i in 0..val.len() {
        let x = val.images.select(&[i]);
        let logits = teacher.forward(&x, BnMode::Eval).unwrap();
        let pred = if logits.data()[1] > logits.data()[0] { 1 } else { 0 };
        confusion[val.labels[i]][pred] += 1;
    }
    let want = (confusion[0][0] + confusion[1][1]) as f64 / val.len() as f64;
    assert_eq!(evaluate_model(teacher, val).unwrap(), want);
}

#[test]
fn single_curriculum_run() {
    let mut cfg = toy_preset();
    cfg.ipc = 5;
    cfg.synthesis.iterations = 5;
    cfg.student.epochs = 2;
    let plan = cfg.plan().unwrap();
    assert_eq!(plan.num_curricula(), 1);
    let out = run_distillation(toy_train(), toy_teacher(), &plan, &cfg.distill_config(), None).unwrap();
    assert_eq!(out.students.len(), 1);
    assert_eq!(out.dataset.records.len(), 10);
    assert!(out.dataset.records.iter().all(|r| r.curriculum_index == 1));
}

#[test]
fn teacher_training_is_deterministic_and_logged() {
    let cfg = toy_preset();
    let squeeze = short(&cfg.squeeze, 3);
    let tmp = tempfile::tempdir().unwrap();
    let log = tmp.path().join("metrics.jsonl");
    let mut sink = JsonLines::create(&log).unwrap();
    let a: Model32 = train_teacher(toy_train(), "convnet-1-w4", &squeeze, Some(toy_val()), &mut sink).unwrap();
    drop(sink);
    let b: Model32 = train_teacher(toy_train(), "convnet-1-w4", &squeeze, Some(toy_val()), &mut JsonLines::discard()).unwrap();
    assert_eq!(a.to_bytes(), b.to_bytes());
    let records: Vec<MetricsRecord> =
        fs::read_to_string(&log).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(records.iter().any(|r| r.split == "train" && r.epoch == 2));
    assert!(records.iter().any(|r| r.split == "val"));
}

#[test]
fn constant_predictor_scores_class_prior() {
    let mut model: Model32 = build_model("convnet-1-w4", 2, [3, 16, 16], 0).unwrap();
    model.visit_params_mut(&mut |_, p| p.fill(0.0));
    // Ties resolve to class 0, which holds half of the balanced split.
    assert_eq!(predict(&model, toy_val(), None).unwrap(), vec![0; toy_val().len()]);
    assert_eq!(evaluate_model(&model, toy_val()).unwrap(), 0.5);
    assert_eq!(predict(&model, toy_val(), Some(&[1])).unwrap(), vec![1; toy_val().len()]);
}

#[test]
fn strong_anchor_keeps_images_at_seeds() {
    let seeds = seeds_of_class(5);
    let cfg = SynthesisConfig { alpha_reg: 1e6, iterations: 100, ..toy_preset().synthesis };
    let out = synthesize_subset(toy_teacher(), None, &seeds, 1, &cfg, &mut JsonLines::discard()).unwrap();
    let mut dist = 0.0f64;
    for (i, r) in out.records.iter().enumerate() {
        dist += r.image.iter().zip(seeds.images.sample(i)).map(|(a, b)| (a - b).abs() as f64).sum::<f64>();
    }
    let mean = dist / (out.records.len() * seeds.images.sample_len()) as f64;
    assert!(mean < 1e-2, "mean pixel distance {mean}");
}

#[test]
fn smoothed_loss_decreases_and_pixels_stay_valid() {
    let seeds = seeds_of_class(5);
    let cfg = toy_preset().synthesis;
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("trace.jsonl");
    let mut sink = JsonLines::create(&path).unwrap();
    let out = synthesize_subset(toy_teacher(), None, &seeds, 1, &cfg, &mut sink).unwrap();
    drop(sink);
    assert_eq!(out.trace.len(), cfg.iterations);
    assert_eq!(fs::read_to_string(&path).unwrap().lines().count(), cfg.iterations);
    let window = |s: &[cudd::recover::LossTraceRecord]| s.iter().map(|r| r.loss_total).sum::<f64>() / s.len() as f64;
    let (start, end) = (window(&out.trace[..50]), window(&out.trace[out.trace.len() - 50..]));
    assert!(end < start, "smoothed loss {start} -> {end}");
    assert!(out.records.iter().all(|r| r.image.iter().all(|v| (0.0..=1.0).contains(v))));
    assert!(out.records.iter().zip(&seeds.seed_indices).all(|(r, s)| r.seed_index == *s && r.curriculum_index == 1));
}

#[test]
fn run_directory_layout() {
    let mut cfg = toy_preset();
    cfg.synthesis.iterations = 5;
    cfg.student.epochs = 2;
    let plan = cfg.plan().unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let out = run_distillation(toy_train(), toy_teacher(), &plan, &cfg.distill_config(), Some(tmp.path())).unwrap();
    assert_eq!(plan.num_curricula(), 2);
    assert!(tmp.path().join("plan.json").is_file());
    assert!(tmp.path().join("metrics.jsonl").is_file());
    for j in 1..=2 {
        let dir = curriculum_dir(tmp.path(), j);
        for f in ["seeds.jsonl", "loss_trace.jsonl", "student.ckpt", "done.json"] {
            assert!(dir.join(f).is_file(), "{}", dir.join(f).display());
        }
        let seeds = fs::read_to_string(dir.join("seeds.jsonl")).unwrap().lines().count();
        assert_eq!(seeds, 2 * plan.subset_size(j));
        let done: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("done.json")).unwrap()).unwrap();
        assert_eq!(done["discardable"], serde_json::json!(["student.ckpt"]));
        assert_eq!(done["curriculum"], j);
    }
    assert_eq!(load_synthetic(&tmp.path().join("final")).unwrap(), out.dataset);
    assert_eq!(out.dataset.per_class_counts().values().copied().collect::<Vec<_>>(), vec![10, 10]);
    // Student j trains on the cumulative union of curricula 1..=j.
    for (j, s) in out.students.iter().enumerate() {
        assert_eq!(s.arch_id(), cfg.student_arch);
        assert_eq!(out.dataset.through_curriculum(j + 1).len(), 2 * plan.cum_size(j + 1));
    }
}

#[test]
fn random_real_baseline_uses_real_images() {
    let sds = random_real_baseline(toy_train(), 7, 3).unwrap();
    assert_eq!(sds.records.len(), 14);
    assert_eq!(sds.per_class_counts().values().copied().collect::<Vec<_>>(), vec![7, 7]);
    for r in &sds.records {
        let i = r.seed_index.unwrap();
        assert_eq!(r.image, toy_train().images.sample(i));
        assert_eq!(r.label, toy_train().labels[i]);
    }
    assert_eq!(random_real_baseline(toy_train(), 7, 3).unwrap(), sds);
}

#[test]
fn evaluation_seeds_share_one_config() {
    let cfg = toy_preset();
    let sds = random_real_baseline(toy_train(), 5, 0).unwrap();
    let eval = short(&cfg.evaluation, 5);
    let r = evaluate_synthetic(&sds, toy_teacher(), &["convnet-1-w4", "convnet-2-w4"], toy_val(), &eval, 3, &mut JsonLines::discard())
        .unwrap();
    assert_eq!(r.len(), 2);
    assert_eq!(r[0].seeds, vec![eval.rng_seed, eval.rng_seed + 1, eval.rng_seed + 2]);
    assert_eq!(r[0].config_hash, r[1].config_hash);
    assert_eq!(r[0].accuracies.len(), 3);
    let single = continual_eval(&sds, toy_teacher(), toy_val(), "convnet-1-w4", 1, &eval, 0, &mut JsonLines::discard()).unwrap();
    assert_eq!(single, vec![r[0].accuracies[0]]);
}

#[test]
fn continual_steps_must_divide_classes() {
    let sds = random_real_baseline(toy_train(), 5, 0).unwrap();
    let eval = short(&toy_preset().evaluation, 2);
    let err = continual_eval(&sds, toy_teacher(), toy_val(), "convnet-1-w4", 3, &eval, 0, &mut JsonLines::discard()).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
    let two = continual_eval(&sds, toy_teacher(), toy_val(), "convnet-1-w4", 2, &eval, 0, &mut JsonLines::discard()).unwrap();
    // The first step sees a single class, so restricted prediction is exact.
    assert_eq!(two.len(), 2);
    assert_eq!(two[0], 1.0);
}

#[test]
fn exported_features_match_recomputation() {
    let teacher = toy_teacher();
    let idx = [0, 1, 2, 0];
    let images = toy_val().images.select(&idx);
    let labels = toy_val().labels_of(&idx);
    let tmp = tempfile::tempdir().unwrap();
    let (bin, side) = export_features(teacher, &images, &labels, tmp.path()).unwrap();
    let meta: FeatureSidecar = serde_json::from_str(&fs::read_to_string(side).unwrap()).unwrap();
    assert_eq!((meta.rows, meta.dim, meta.labels.as_slice()), (4, teacher.feature_dim(), labels.as_slice()));
    let bytes = fs::read(bin).unwrap();
    assert_eq!(bytes.len(), 4 * 4 * meta.dim);
    let values: Vec<f32> = bytes.chunks(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
    let want = teacher.features(&images).unwrap();
    assert_eq!(values, want.data());
    assert_eq!(values[..meta.dim], values[3 * meta.dim..]);
    let logits = teacher.forward(&images, BnMode::Eval).unwrap();
    assert_eq!(logits.dim(0), 4);
}
