use std::fs;
use std::path::Path;

use tiss_kit::losses::{patch_l2, LossWeights};
use tiss_kit::model::{load_checkpoint, Model, ModelConfig, PatchStates};
use tiss_kit::protocol::*;
use tiss_kit::trainer::*;
use tiss_kit::{Error, LabelGrid, RgbImage};

fn model_config() -> ModelConfig {
    ModelConfig {
        image_size: 16,
        patch_size: 4,
        embed_dim: 16,
        n_layers: 2,
        n_heads: 2,
        mlp_ratio: 2.0,
        seed: 0,
    }
}

fn toy_spec() -> ToySpec {
    ToySpec {
        n_images: 24,
        image_size: 16,
        n_classes: 3,
        seed: 5,
    }
}

fn sequence() -> TaskSequence {
    build_task_sequence(toy_class_names(3), vec![2, 1], Mode::Overlapped).unwrap()
}

fn config(method: Method, epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 4,
        crop_size: 16,
        method,
        seed,
        ..Default::default()
    }
}

/// Remapped in-memory samples for every step.
fn step_samples(seq: &TaskSequence) -> Vec<Vec<(RgbImage, LabelGrid)>> {
    let raw = toy_samples(&toy_spec()).unwrap();
    let records: Vec<SampleRecord> = raw
        .iter()
        .enumerate()
        .map(|(i, (_, m))| SampleRecord::from_mask(i.to_string(), "".into(), "".into(), m))
        .collect();
    split_dataset(&records, seq)
        .unwrap()
        .iter()
        .map(|step| {
            step.records
                .iter()
                .map(|r| {
                    let (img, mask) = &raw[r.id.parse::<usize>().unwrap()];
                    (img.clone(), remap_mask(mask, step, seq).unwrap())
                })
                .collect()
        })
        .collect()
}

fn params(model: &Model<f32>) -> Vec<(String, Vec<f32>)> {
    model.tensors().into_iter().map(|(n, t)| (n, t.iter().copied().collect())).collect()
}

fn train(dir: &Path, t: usize, prev: Option<&Path>, cfg: &TrainConfig) -> tiss_kit::Result<StepResult> {
    let seq = sequence();
    let mc = model_config();
    let ctx = RunContext {
        seq: &seq,
        model: &mc,
        out_dir: dir,
    };
    train_step_on(&ctx, t, &step_samples(&seq)[t], prev, cfg)
}

#[test]
fn zero_learning_rate_is_a_no_op() {
    let seq = sequence();
    let samples = &step_samples(&seq)[0];
    let mut model = Model::<f32>::new(model_config(), 3, 1).unwrap();
    let before = params(&model);
    let cfg = TrainConfig {
        weight_decay: 0.0,
        ..config(Method::Tiss, 2, 0)
    };
    let plan = StepPlan {
        base_lr: 0.0,
        ..cfg.plan(&seq, 0)
    };
    let log = fit(&mut model, None, samples, &plan, &cfg).unwrap();
    assert_eq!(log.len(), 2);
    assert_eq!(params(&model), before);
}

#[test]
fn teacher_is_untouched_by_training() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(Method::Tiss, 2, 0);
    let step0 = train(&dir.path().join("a"), 0, None, &cfg).unwrap().checkpoint_ref;
    let bytes = fs::read(&step0).unwrap();

    let seq = sequence();
    let teacher = load_checkpoint(&step0, None).unwrap().model.snapshot();
    let frozen_before = params(&teacher);
    let mut student = teacher.thaw();
    student.grow_head(1, cfg.grow_variant).unwrap();
    fit(&mut student, Some(&teacher), &step_samples(&seq)[1], &cfg.plan(&seq, 1), &cfg).unwrap();
    assert_eq!(params(&teacher), frozen_before);
    assert_ne!(params(&student)[0], frozen_before[0]);

    train(&dir.path().join("b"), 1, Some(&step0), &cfg).unwrap();
    assert_eq!(fs::read(&step0).unwrap(), bytes);
}

#[test]
fn cross_entropy_decreases_on_step_zero() {
    let dir = tempfile::tempdir().unwrap();
    let mut decreased = 0;
    for seed in 0..3 {
        let r = train(&dir.path().join(seed.to_string()), 0, None, &config(Method::Tiss, 8, seed)).unwrap();
        let first = r.per_epoch_losses.first().unwrap().losses.unce.unwrap();
        let last = r.per_epoch_losses.last().unwrap().losses.unce.unwrap();
        decreased += usize::from(last < first);
    }
    assert!(decreased >= 2, "CE decreased in only {decreased}/3 seeds");
}

#[test]
fn heavy_distillation_limits_drift() {
    let dir = tempfile::tempdir().unwrap();
    let base = config(Method::Mib, 3, 0);
    let step0 = train(&dir.path().join("s0"), 0, None, &base).unwrap().checkpoint_ref;
    let teacher = load_checkpoint(&step0, None).unwrap().model;
    let only = |w_unce: f64, w_unkd: f64| TrainConfig {
        weights: Some(LossWeights {
            w_unce,
            w_unkd,
            w_cd: 0.0,
            w_ct: 0.0,
            w_l1: 0.0,
            w_l2: 0.0,
        }),
        ..base.clone()
    };
    let drift = |name: &str, cfg: &TrainConfig| {
        let ck = train(&dir.path().join(name), 1, Some(&step0), cfg).unwrap().checkpoint_ref;
        let student = load_checkpoint(&ck, None).unwrap().model;
        toy_samples(&toy_spec())
            .unwrap()
            .iter()
            .map(|(img, _)| {
                let s = student.cast::<f64>().encode(&img.view()).unwrap();
                let t = teacher.cast::<f64>().encode(&img.view()).unwrap();
                let last = |p: &PatchStates<f64>| PatchStates::new(vec![p.last().clone()], p.grid).unwrap();
                patch_l2(&last(&s), &last(&t)).unwrap()
            })
            .sum::<f64>()
    };
    let kd = drift("kd", &only(0.0, 1e4));
    let ce = drift("ce", &only(1.0, 0.0));
    assert!(kd < ce, "KD drift {kd} not below CE drift {ce}");
}

#[test]
fn incremental_run_from_disk() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    generate_toy_dataset(&data, &toy_spec()).unwrap();
    let dataset = load_dataset_dir(&data).unwrap();
    let manifest = TaskManifest::build(&dataset, vec![2, 1], Mode::Overlapped, 0).unwrap();
    let seq = manifest.sequence().unwrap();
    let mc = model_config();
    let out = dir.path().join("run");
    let ctx = RunContext {
        seq: &seq,
        model: &mc,
        out_dir: &out,
    };
    let results = run_incremental(&ctx, &manifest.step_datasets().unwrap(), &config(Method::Tiss, 1, 0)).unwrap();
    assert_eq!(results.len(), 2);
    let heads: Vec<usize> = results
        .iter()
        .map(|r| load_checkpoint(&r.checkpoint_ref, Some(&mc)).unwrap().model.n_classes())
        .collect();
    assert_eq!(heads, vec![3, 4]);
    assert!(checkpoint_path(&out, 0).exists() && checkpoint_path(&out, 1).exists());
    let log = fs::read_to_string(out.join(TRAIN_LOG)).unwrap();
    assert_eq!(log.lines().count(), 2);
}

#[test]
fn identical_runs_write_identical_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(Method::Tiss, 2, 7);
    let a = train(&dir.path().join("a"), 0, None, &cfg).unwrap();
    let b = train(&dir.path().join("b"), 0, None, &cfg).unwrap();
    assert_eq!(fs::read(a.checkpoint_ref).unwrap(), fs::read(b.checkpoint_ref).unwrap());
    assert_eq!(a.per_epoch_losses, b.per_epoch_losses);
    let c = train(&dir.path().join("c"), 0, None, &config(Method::Tiss, 2, 8)).unwrap();
    assert_ne!(a.per_epoch_losses, c.per_epoch_losses);
}

#[test]
fn later_step_needs_previous_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let err = train(dir.path(), 1, None, &config(Method::Tiss, 1, 0)).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err:?}");
    let err = train(dir.path(), 1, Some(&dir.path().join("missing.ckpt")), &config(Method::Tiss, 1, 0)).unwrap_err();
    assert!(!matches!(err, Error::Diverged(_)));
}

#[test]
fn divergence_is_reported_with_a_dump() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        lr_first_step: 1e30,
        grad_clip: 1e30,
        ..config(Method::Tiss, 3, 0)
    };
    let err = train(dir.path(), 0, None, &cfg).unwrap_err();
    assert!(matches!(err, Error::Diverged(_)), "{err:?}");
    let dump = fs::read_to_string(dir.path().join("diverged_step0.json")).unwrap();
    serde_json::from_str::<serde_json::Value>(&dump).unwrap();
    assert!(!checkpoint_path(dir.path(), 0).exists());
}
