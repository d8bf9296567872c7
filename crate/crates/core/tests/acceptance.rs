//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on failure.
//!
//! Every numeric check compares the library against an oracle written here
//! from first principles (explicit exponentials, double loops, hand counts).

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array1, Array2, Array3, ArrayView1};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use tiss_kit::diagnostics::similarity_profile;
use tiss_kit::losses::*;
use tiss_kit::metrics::{evaluate, report, ConfusionMatrix, Report};
use tiss_kit::model::{grow_head, load_checkpoint, DecoderHead, GrowVariant, Model, ModelConfig, PatchStates, SegLogits};
use tiss_kit::protocol::*;
use tiss_kit::trainer::{train_step_on, Method, RunContext, StepResult, TrainConfig};
use tiss_kit::{LabelGrid, RgbImage};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------- oracles

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn lane(grid: &Array3<f64>, y: usize, x: usize) -> Vec<f64> {
    grid.slice(ndarray::s![y, x, ..]).to_vec()
}

fn standard_ce(logits: &Array3<f64>, target: &LabelGrid) -> f64 {
    let (h, w, _) = logits.dim();
    let (mut total, mut n) = (0.0, 0);
    for y in 0..h {
        for x in 0..w {
            let t = target[[y, x]];
            if t == IGNORE {
                continue;
            }
            total -= softmax(&lane(logits, y, x))[t as usize].ln();
            n += 1;
        }
    }
    total / n as f64
}

fn brute_cos(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let n = a.nrows();
    let mut p = Array2::zeros((n, b.nrows()));
    for i in 0..n {
        for j in 0..b.nrows() {
            let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
            for k in 0..a.ncols() {
                dot += a[[i, k]] * b[[j, k]];
                na += a[[i, k]] * a[[i, k]];
                nb += b[[j, k]] * b[[j, k]];
            }
            p[[i, j]] = dot.abs() / (na.sqrt() * nb.sqrt());
        }
    }
    p
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((r, c), || rng.sample(StandardNormal))
}

fn random_orthonormal(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
    let mut q = random_matrix(rng, n, d);
    for i in 0..n {
        for j in 0..i {
            let proj = q.row(i).dot(&q.row(j));
            let rj = q.row(j).to_owned();
            q.row_mut(i).scaled_add(-proj, &rj);
        }
        let norm = q.row(i).dot(&q.row(i)).sqrt();
        q.row_mut(i).mapv_inplace(|v| v / norm);
    }
    q
}

/// Relative error between two gradient vectors, norm-wise.
fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|v| v * v).sum::<f64>().sqrt().max(b.iter().map(|v| v * v).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Central differences of `f` around `x`.
fn numeric_grad(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut buf = x.to_vec();
    (0..x.len())
        .map(|i| {
            buf[i] = x[i] + h;
            let up = f(&buf);
            buf[i] = x[i] - h;
            let down = f(&buf);
            buf[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

// ---------------------------------------------------------------- criteria

fn loss_oracles() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(11);

    let mut worst_ce = 0.0f64;
    for _ in 0..200 {
        let (h, w, c) = (rng.random_range(1..5), rng.random_range(1..5), rng.random_range(2..7));
        let logits = Array3::from_shape_simple_fn((h, w, c), || rng.random_range(-6.0..6.0));
        let mut target = Array2::from_shape_simple_fn((h, w), || rng.random_range(0..c) as u8);
        target[[0, 0]] = if rng.random_bool(0.3) { IGNORE } else { target[[0, 0]] };
        if target.iter().all(|&t| t == IGNORE) {
            target[[0, 0]] = 0;
        }
        let part = ClassPartition::new(1, c - 1).unwrap();
        let got = unbiased_cross_entropy(&SegLogits::new(logits.clone()), &target, &part).unwrap();
        worst_ce = worst_ce.max((got - standard_ce(&logits, &target)).abs());
    }
    ensure(worst_ce <= 1e-6, || format!("unbiased CE at t=0 differs from CE by {worst_ce:e}"))?;

    let mut worst_mass = 0.0f64;
    for _ in 0..200 {
        let n_old = rng.random_range(1..5);
        let n_new = rng.random_range(1..4);
        let part = ClassPartition::new(n_old, n_new).unwrap();
        let z = Array1::from_shape_simple_fn(n_old + n_new, || rng.random_range(-8.0..8.0));
        let q = kd_rebucketed::<f64>(z.view(), &part);
        worst_mass = worst_mass.max((q.sum() - 1.0).abs());
    }
    ensure(worst_mass <= 1e-6, || format!("re-bucketed mass off by {worst_mass:e}"))?;

    let cfg = ModelConfig {
        image_size: 16,
        patch_size: 4,
        embed_dim: 16,
        n_layers: 2,
        n_heads: 2,
        mlp_ratio: 2.0,
        seed: 0,
    };
    let mut worst_kd = 0.0f64;
    for seed in 0..5 {
        let teacher = Model::<f64>::new(cfg.clone(), 3, seed).unwrap().snapshot();
        let mut student = teacher.thaw();
        student.grow_head(2, GrowVariant::ProbabilityPreserving).unwrap();
        let img = Array3::from_shape_simple_fn((16, 16, 3), || rng.random_range(0.0..1.0f32));
        let t_logits = teacher.logits(&img.view()).unwrap();
        let s_logits = student.logits(&img.view()).unwrap();
        let part = ClassPartition::new(3, 2).unwrap();
        let kd = unbiased_kd(&s_logits, &t_logits, &part, None).unwrap();
        let mut entropy = 0.0;
        for y in 0..16 {
            for x in 0..16 {
                entropy -= softmax(&lane(&t_logits.grid, y, x)).iter().map(|p| p * p.ln()).sum::<f64>();
            }
        }
        worst_kd = worst_kd.max((kd - entropy / 256.0).abs());
    }
    ensure(worst_kd <= 1e-5, || format!("KD after init differs from teacher entropy by {worst_kd:e}"))?;

    let single = random_matrix(&mut rng, 1, 8);
    let other = random_matrix(&mut rng, 1, 8);
    ensure(
        contrastive_distillation(&single.view(), &other.view()).unwrap() == 0.0
            && contrastive_patch(&single.view(), &other.view()).unwrap() == 0.0,
        || "n=1 contrastive loss is not exactly 0".into(),
    )?;
    let want = (1.0 + (-1.0f64).exp()).ln();
    let mut worst_cf = 0.0f64;
    for _ in 0..20 {
        let q = random_orthonormal(&mut rng, 2, 6);
        worst_cf = worst_cf
            .max((contrastive_distillation(&q.view(), &q.view()).unwrap() - want).abs())
            .max((contrastive_patch(&q.view(), &q.view()).unwrap() - want).abs());
    }
    ensure(worst_cf <= 1e-6, || format!("orthonormal closed form off by {worst_cf:e}"))?;
    let secs = started.elapsed().as_secs_f64();
    ensure(secs < 30.0, || format!("took {secs:.1}s"))?;
    Ok(format!(
        "CE|t=0 {worst_ce:.1e}, mass {worst_mass:.1e}, KD-entropy {worst_kd:.1e}, closed form {worst_cf:.1e}, {secs:.2}s"
    ))
}

fn gradient_checks() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let h = 1e-5;
    let mut report = Vec::new();
    let mut worst = 0.0f64;
    let mut record = |name: &str, err: f64| {
        worst = worst.max(err);
        report.push(format!("{name} {err:.1e}"));
    };

    // Unbiased CE and KD on a 2x2 grid with 3 old and 2 new classes.
    let part = ClassPartition::new(3, 2).unwrap();
    let shape = (2, 2, 5);
    let z = Array3::from_shape_simple_fn(shape, || rng.random_range(-2.0..2.0));
    let target: LabelGrid = ndarray::array![[0, 3], [4, IGNORE]];
    let (_, g) = unbiased_cross_entropy_with_grad(&SegLogits::new(z.clone()), &target, &part).unwrap();
    let num = numeric_grad(z.as_slice().unwrap(), h, |x| {
        let grid = Array3::from_shape_vec(shape, x.to_vec()).unwrap();
        unbiased_cross_entropy(&SegLogits::new(grid), &target, &part).unwrap()
    });
    record("ce", rel_err(g.as_slice().unwrap(), &num));

    let teacher = SegLogits::new(Array3::from_shape_simple_fn((2, 2, 3), || rng.random_range(-2.0..2.0)));
    let (_, g) = unbiased_kd_with_grad(&SegLogits::new(z.clone()), &teacher, &part, None).unwrap();
    let num = numeric_grad(z.as_slice().unwrap(), h, |x| {
        let grid = Array3::from_shape_vec(shape, x.to_vec()).unwrap();
        unbiased_kd(&SegLogits::new(grid), &teacher, &part, None).unwrap()
    });
    record("kd", rel_err(g.as_slice().unwrap(), &num));

    // Patch L1 and L2 on 3 layers of 4 patches x 8 dims; differences kept away from 0.
    let (l, n, d) = (3, 4, 8);
    let teacher_layers: Vec<Array2<f64>> = (0..l).map(|_| random_matrix(&mut rng, n, d)).collect();
    let student_layers: Vec<Array2<f64>> = teacher_layers
        .iter()
        .map(|t| t.mapv(|v| v + if rng.random_bool(0.5) { 1.0 } else { -1.0 } * rng.random_range(0.1..1.0)))
        .collect();
    let teacher_states = PatchStates::new(teacher_layers, (2, 2)).unwrap();
    let flat: Vec<f64> = student_layers.iter().flat_map(|a| a.iter().copied()).collect();
    let unflatten = |x: &[f64]| {
        PatchStates::new(
            x.chunks(n * d).map(|c| Array2::from_shape_vec((n, d), c.to_vec()).unwrap()).collect(),
            (2, 2),
        )
        .unwrap()
    };
    let student_states = unflatten(&flat);
    let l1 = patch_l1_with_grad(&student_states, &teacher_states).unwrap().1;
    let g: Vec<f64> = l1.iter().flat_map(|a| a.iter().copied()).collect();
    let num = numeric_grad(&flat, h, |x| patch_l1(&unflatten(x), &teacher_states).unwrap());
    record("l1", rel_err(&g, &num));
    let l2 = patch_l2_with_grad(&student_states, &teacher_states).unwrap().1;
    let g: Vec<f64> = l2.iter().flat_map(|a| a.iter().copied()).collect();
    let num = numeric_grad(&flat, h, |x| patch_l2(&unflatten(x), &teacher_states).unwrap());
    record("l2", rel_err(&g, &num));

    // Contrastive distillation (student side) and patch contrast (both layers) on 4 x 8 patches.
    let a = random_matrix(&mut rng, n, d);
    let b = random_matrix(&mut rng, n, d);
    let (_, ga) = contrastive_distillation_with_grad(&a.view(), &b.view()).unwrap();
    let num = numeric_grad(a.as_slice().unwrap(), h, |x| {
        let m = Array2::from_shape_vec((n, d), x.to_vec()).unwrap();
        contrastive_distillation(&m.view(), &b.view()).unwrap()
    });
    record("cd", rel_err(ga.as_slice().unwrap(), &num));

    let (_, g_last, g_first) = contrastive_patch_with_grad(&a.view(), &b.view()).unwrap();
    let joint: Vec<f64> = a.iter().chain(b.iter()).copied().collect();
    let num = numeric_grad(&joint, h, |x| {
        let last = Array2::from_shape_vec((n, d), x[..n * d].to_vec()).unwrap();
        let first = Array2::from_shape_vec((n, d), x[n * d..].to_vec()).unwrap();
        contrastive_patch(&last.view(), &first.view()).unwrap()
    });
    let analytic: Vec<f64> = g_last.iter().chain(g_first.iter()).copied().collect();
    record("ct", rel_err(&analytic, &num));

    let secs = started.elapsed().as_secs_f64();
    let summary = format!("{}, {secs:.2}s", report.join(", "));
    ensure(worst < 1e-4, || format!("relative error {worst:.1e} >= 1e-4 ({summary})"))?;
    ensure(secs < 120.0, || format!("took {secs:.1}s"))?;
    Ok(summary)
}

fn init_invariant() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (c_old, n_new, d) = (4, 3, 16);
    let old = DecoderHead::new(
        random_matrix(&mut rng, c_old, d),
        Array1::from_shape_simple_fn(c_old, || rng.random_range(-1.0..1.0)),
    )
    .unwrap();
    let new = grow_head(&old, n_new, GrowVariant::ProbabilityPreserving).unwrap();
    let features = random_matrix(&mut rng, 100, d);
    let mut worst = 0.0f64;
    for f in features.rows() {
        let score = |head: &DecoderHead<f64>, f: ArrayView1<f64>| -> Vec<f64> {
            (0..head.n_classes()).map(|c| head.weights.row(c).dot(&f) + head.biases[c]).collect()
        };
        let p_old = softmax(&score(&old, f));
        let p_new = softmax(&score(&new, f));
        let bucket = p_new[0] + p_new[c_old..].iter().sum::<f64>();
        worst = worst.max((bucket - p_old[0]).abs());
        for c in 1..c_old {
            worst = worst.max((p_new[c] - p_old[c]).abs());
        }
    }
    ensure(worst <= 1e-5, || format!("probability moved by {worst:e}"))?;
    Ok(format!("100 features, max deviation {worst:.1e}"))
}

fn protocol_invariants() -> Outcome {
    let started = Instant::now();
    let spec = ToySpec {
        n_images: 200,
        image_size: 32,
        n_classes: 6,
        seed: 4,
    };
    let samples = toy_samples(&spec).map_err(|e| e.to_string())?;
    let masks: BTreeMap<String, LabelGrid> = samples
        .iter()
        .enumerate()
        .map(|(i, (_, m))| (format!("{i:05}"), m.clone()))
        .collect();
    let records: Vec<SampleRecord> = masks
        .iter()
        .map(|(id, m)| SampleRecord::from_mask(id.clone(), PathBuf::new(), PathBuf::new(), m))
        .collect();
    let mut checked = 0;
    for sizes in [vec![3, 3], vec![2, 2, 2], vec![4, 1, 1], vec![1, 1, 1, 1, 1, 1]] {
        let split = |mode| {
            let seq = build_task_sequence(toy_class_names(6), sizes.clone(), mode).unwrap();
            let steps = split_dataset(&records, &seq).unwrap();
            (seq, steps)
        };
        let (seq_d, disjoint) = split(Mode::Disjoint);
        let (seq_o, overlapped) = split(Mode::Overlapped);
        let ids = |s: &StepDataset| s.records.iter().map(|r| r.id.clone()).collect::<BTreeSet<_>>();
        for a in 0..disjoint.len() {
            for b in a + 1..disjoint.len() {
                ensure(ids(&disjoint[a]).is_disjoint(&ids(&disjoint[b])), || {
                    format!("{sizes:?}: disjoint steps {a} and {b} share images")
                })?;
            }
            ensure(ids(&overlapped[a]).is_superset(&ids(&disjoint[a])), || {
                format!("{sizes:?}: overlapped step {a} misses disjoint images")
            })?;
        }
        for (seq, steps) in [(&seq_d, &disjoint), (&seq_o, &overlapped)] {
            for step in steps.iter() {
                let allowed: BTreeSet<u8> = seq
                    .new_classes(step.step_index)
                    .chain([BACKGROUND, IGNORE])
                    .collect();
                for r in &step.records {
                    let remapped = remap_mask(&masks[&r.id], step, seq).unwrap();
                    ensure(remapped.iter().all(|c| allowed.contains(c)), || {
                        format!("{sizes:?}: record {} leaks classes outside its step", r.id)
                    })?;
                    checked += 1;
                }
            }
        }
    }
    let secs = started.elapsed().as_secs_f64();
    ensure(secs < 10.0, || format!("took {secs:.1}s"))?;
    Ok(format!("4 schedules x 2 modes, {checked} remapped masks, {secs:.2}s"))
}

fn similarity_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut worst = 0.0f64;
    let mut instances = 0;
    for n in 1..=8 {
        for _ in 0..25 {
            let d = rng.random_range(1..10);
            let a = random_matrix(&mut rng, n, d);
            let b = random_matrix(&mut rng, n, d);
            let brute = brute_cos(&a, &b);
            let got = abs_cos_matrix(&a.view(), &b.view()).unwrap();
            worst = worst.max((&got - &brute).mapv(f64::abs).fold(0.0, |m: f64, &v| m.max(v)));
            let diag: f64 = (0..n).map(|i| brute[[i, i]]).sum::<f64>() / n as f64;
            worst = worst.max((s_positive(&a.view(), &b.view()).unwrap() - diag).abs());
            if n >= 2 {
                let mut off = 0.0;
                for i in 0..n {
                    for j in 0..n {
                        if i != j {
                            off += brute[[i, j]];
                        }
                    }
                }
                off /= (n * (n - 1)) as f64;
                worst = worst.max((s_negative(&a.view(), &b.view()).unwrap() - off).abs());
            }
            instances += 1;
        }
    }
    ensure(worst <= 1e-7, || format!("brute-force mismatch {worst:e}"))?;

    let cfg = ModelConfig {
        image_size: 16,
        patch_size: 4,
        embed_dim: 16,
        n_layers: 3,
        n_heads: 2,
        mlp_ratio: 2.0,
        seed: 0,
    };
    let models: Vec<Model<f32>> = (0..3).map(|s| Model::new(cfg.clone(), 3 + s as usize, s).unwrap()).collect();
    let images: Vec<RgbImage> = (0..6)
        .map(|_| Array3::from_shape_simple_fn((16, 16, 3), || rng.random_range(0.0..1.0f32)))
        .collect();
    let profile = similarity_profile(&models, &images, 6, 0).map_err(|e| e.to_string())?;
    let in_range = profile.per_step.iter().all(|r| {
        [r.s_pos_teacher, r.s_neg_teacher, r.s_pos_depth, r.s_neg_depth]
            .iter()
            .all(|v| (0.0..=1.0).contains(v))
    });
    ensure(in_range, || format!("profile outside [0, 1]: {profile:?}"))?;
    Ok(format!("{instances} instances, max deviation {worst:.1e}; profile in [0, 1]"))
}

fn miou_engine() -> Outcome {
    let mut cm = ConfusionMatrix::new(2);
    cm.accumulate(&ndarray::array![[0u8, 1], [1, 1]], &ndarray::array![[0u8, 0], [1, 1]])
        .map_err(|e| e.to_string())?;
    let (i0, i1, m) = (cm.iou(0), cm.iou(1), cm.miou(&[0, 1]).unwrap());
    ensure(i0 == Some(0.5) && i1 == Some(2.0 / 3.0) && m == 7.0 / 12.0, || {
        format!("got {i0:?}, {i1:?}, {m}")
    })?;

    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let target = Array2::from_shape_simple_fn((12, 12), || {
        if rng.random_bool(0.1) {
            IGNORE
        } else {
            rng.random_range(0..4u8)
        }
    });
    let pred = Array2::from_shape_simple_fn((12, 12), || rng.random_range(0..4u8));
    let miou_of = |p: &LabelGrid, t: &LabelGrid| {
        let mut cm = ConfusionMatrix::new(4);
        cm.accumulate(p, t).unwrap();
        cm.miou(&[0, 1, 2, 3]).unwrap()
    };
    let base = miou_of(&pred, &target);
    let pairs: Vec<(u8, u8)> = pred.iter().copied().zip(target.iter().copied()).collect();
    for _ in 0..100 {
        let mut shuffled = pairs.clone();
        shuffled.shuffle(&mut rng);
        let p = Array2::from_shape_vec((12, 12), shuffled.iter().map(|x| x.0).collect()).unwrap();
        let t = Array2::from_shape_vec((12, 12), shuffled.iter().map(|x| x.1).collect()).unwrap();
        let v = miou_of(&p, &t);
        ensure(v == base, || format!("shuffle changed mIoU: {v} vs {base}"))?;
    }
    Ok(format!("IoU 1/2, 2/3, mean 7/12 exact; 100 shuffles give {base:.6}"))
}

// ---------------------------------------------------------------- toy runs

struct Toy {
    seq: TaskSequence,
    model: ModelConfig,
    steps: Vec<Vec<(RgbImage, LabelGrid)>>,
    test: Vec<(RgbImage, LabelGrid)>,
    root: PathBuf,
    step0: BTreeMap<(u64, bool), PathBuf>,
}

const EPOCHS: usize = 20;

impl Toy {
    fn new(root: &Path) -> Self {
        let spec = ToySpec {
            n_images: 200,
            image_size: 32,
            n_classes: 4,
            seed: 0,
        };
        let train = toy_samples(&spec).unwrap();
        let test = toy_samples(&ToySpec {
            n_images: 100,
            seed: 1,
            ..spec
        })
        .unwrap();
        let seq = build_task_sequence(toy_class_names(4), vec![2, 2], Mode::Overlapped).unwrap();
        let records: Vec<SampleRecord> = train
            .iter()
            .enumerate()
            .map(|(i, (_, m))| SampleRecord::from_mask(i.to_string(), PathBuf::new(), PathBuf::new(), m))
            .collect();
        let steps = split_dataset(&records, &seq)
            .unwrap()
            .iter()
            .map(|step| {
                step.records
                    .iter()
                    .map(|r| {
                        let (img, mask) = &train[r.id.parse::<usize>().unwrap()];
                        (img.clone(), remap_mask(mask, step, &seq).unwrap())
                    })
                    .collect()
            })
            .collect();
        let test = test
            .into_iter()
            .map(|(img, mask)| {
                let m = remap_mask_seen(&mask, &seq, 1).unwrap();
                (img, m)
            })
            .collect();
        Self {
            seq,
            model: ModelConfig {
                image_size: 32,
                patch_size: 4,
                embed_dim: 32,
                n_layers: 4,
                n_heads: 2,
                mlp_ratio: 2.0,
                seed: 0,
            },
            steps,
            test,
            root: root.to_path_buf(),
            step0: BTreeMap::new(),
        }
    }

    fn config(method: Method, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: EPOCHS,
            batch_size: 8,
            crop_size: 32,
            method,
            seed,
            ..Default::default()
        }
    }

    fn train(&self, dir: &Path, t: usize, prev: Option<&Path>, cfg: &TrainConfig) -> StepResult {
        let ctx = RunContext {
            seq: &self.seq,
            model: &self.model,
            out_dir: dir,
        };
        train_step_on(&ctx, t, &self.steps[t], prev, cfg).unwrap()
    }

    /// Step 0 only depends on the seed and on whether the contrastive
    /// patch loss is active, so it is shared across methods.
    fn step0(&mut self, method: Method, seed: u64) -> PathBuf {
        let cfg = Self::config(method, seed);
        let key = (seed, cfg.resolved_weights(&self.seq).w_ct > 0.0);
        if let Some(p) = self.step0.get(&key) {
            return p.clone();
        }
        let dir = self.root.join(format!("step0_seed{seed}_ct{}", key.1));
        let path = self.train(&dir, 0, None, &cfg).checkpoint_ref;
        self.step0.insert(key, path.clone());
        path
    }

    fn evaluate(&self, checkpoint: &Path, t: usize) -> Report {
        let model = load_checkpoint(checkpoint, Some(&self.model)).unwrap().model;
        let samples: Vec<(RgbImage, LabelGrid)> = self
            .test
            .iter()
            .map(|(img, m)| (img.clone(), m.mapv(|c| if c != IGNORE && c as usize >= self.seq.n_seen(t) { 0 } else { c })))
            .collect();
        report(&evaluate(&model, &samples).unwrap(), &self.seq, t).unwrap()
    }

    fn run(&mut self, method: Method, seed: u64, tag: &str) -> (Report, Report) {
        let prev = self.step0(method, seed);
        let before = self.evaluate(&prev, 0);
        let dir = self.root.join(format!("{}_seed{seed}{tag}", method.name().replace('+', "_")));
        let r = self.train(&dir, 1, Some(&prev), &Self::config(method, seed));
        (before, self.evaluate(&r.checkpoint_ref, 1))
    }
}

fn pct(v: Option<f64>) -> f64 {
    100.0 * v.unwrap_or(f64::NAN)
}

struct Grid {
    results: HashMap<(Method, u64), (Report, Report)>,
    secs: f64,
}

fn run_grid(toy: &mut Toy) -> Grid {
    let started = Instant::now();
    let mut results = HashMap::new();
    for seed in 0..3 {
        for m in [Method::Ft, Method::Mib, Method::Tiss, Method::MibCd, Method::MibCt, Method::MibL1, Method::MibL2] {
            results.insert((m, seed), toy.run(m, seed, ""));
        }
    }
    Grid {
        results,
        secs: started.elapsed().as_secs_f64(),
    }
}

fn directional_forgetting(grid: &Grid) -> Outcome {
    let mut wins = 0;
    let mut lines = Vec::new();
    let mut soft = Vec::new();
    for seed in 0..3 {
        let (ft0, ft) = &grid.results[&(Method::Ft, seed)];
        let (_, tiss) = &grid.results[&(Method::Tiss, seed)];
        let (_, mib) = &grid.results[&(Method::Mib, seed)];
        let drop = pct(ft0.group("old")) - pct(ft.group("old"));
        let gap = pct(tiss.group("old")) - pct(ft.group("old"));
        if gap >= 20.0 && drop >= 20.0 {
            wins += 1;
        }
        lines.push(format!(
            "seed {seed}: ft old {:.1} (drop {drop:.1}), tiss old {:.1} (+{gap:.1})",
            pct(ft.group("old")),
            pct(tiss.group("old"))
        ));
        let d = pct(tiss.group("all")) - pct(mib.group("all"));
        soft.push(format!("{d:+.1}"));
    }
    let summary = format!(
        "{}; tiss-mib all {} (soft, need >= -2); {:.0}s",
        lines.join("; "),
        soft.join("/"),
        grid.secs
    );
    ensure(wins >= 2, || format!("only {wins}/3 seeds: {summary}"))?;
    ensure(grid.secs < 900.0, || format!("grid took {:.0}s", grid.secs))?;
    Ok(summary)
}

fn ablation_direction(grid: &Grid) -> Outcome {
    let (mut cd_wins, mut ct_wins) = (0, 0);
    let mut cells = Vec::new();
    for seed in 0..3 {
        let get = |m| &grid.results[&(m, seed)].1;
        let (mib, cd, ct) = (get(Method::Mib), get(Method::MibCd), get(Method::MibCt));
        let (mib_old, cd_old) = (mib.group("old").unwrap(), cd.group("old").unwrap());
        let (mib_new, ct_new) = (mib.group("new").unwrap(), ct.group("new").unwrap());
        cd_wins += usize::from(cd_old >= mib_old);
        ct_wins += usize::from(ct_new >= mib_new);
        cells.push(format!(
            "seed {seed}: old mib/+cd {:.2}/{:.2}, new mib/+ct {:.2}/{:.2}, all +l1/+l2 {:.2}/{:.2}",
            100.0 * mib_old,
            100.0 * cd_old,
            100.0 * mib_new,
            100.0 * ct_new,
            pct(get(Method::MibL1).group("all")),
            pct(get(Method::MibL2).group("all")),
        ));
    }
    let summary = format!("cd {cd_wins}/3, ct {ct_wins}/3; {}", cells.join("; "));
    ensure(cd_wins >= 2 && ct_wins >= 2, || summary.clone())?;
    Ok(summary)
}

fn determinism(toy: &mut Toy, grid: &Grid) -> Outcome {
    let (_, first) = &grid.results[&(Method::Tiss, 0)];
    let step0 = toy.root.join("rerun_step0");
    let cfg = Toy::config(Method::Tiss, 0);
    let prev = toy.train(&step0, 0, None, &cfg).checkpoint_ref;
    ensure(
        std::fs::read(&prev).unwrap() == std::fs::read(toy.step0(Method::Tiss, 0)).unwrap(),
        || "step-0 checkpoints differ between identical runs".into(),
    )?;
    let r = toy.train(&toy.root.join("rerun_step1"), 1, Some(&prev), &cfg);
    let second = toy.evaluate(&r.checkpoint_ref, 1);
    ensure(first.to_csv() == second.to_csv(), || "metrics CSV differs between identical runs".into())?;

    let loaded = load_checkpoint(&r.checkpoint_ref, Some(&toy.model)).unwrap().model;
    let reloaded_path = toy.root.join("resaved.ckpt");
    tiss_kit::model::save_checkpoint(&reloaded_path, &loaded, &toy.seq, 1).unwrap();
    let again = load_checkpoint(&reloaded_path, None).unwrap().model;
    let mut worst = 0.0f32;
    for (img, _) in toy.test.iter().take(10) {
        let a = loaded.logits(&img.view()).unwrap();
        let b = again.logits(&img.view()).unwrap();
        worst = worst.max((&a.grid - &b.grid).mapv(f32::abs).fold(0.0, |m: f32, &v| m.max(v)));
    }
    ensure(worst <= 1e-6, || format!("round-trip forward differs by {worst:e}"))?;
    Ok(format!("identical checkpoints and metrics CSV; round-trip max |dlogit| {worst:.1e}"))
}

// ---------------------------------------------------------------- driver

fn main() {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if !filter.is_empty() && !filter.iter().any(|f| "acceptance".contains(f.as_str())) {
        return;
    }
    let tmp = tempfile::tempdir().unwrap();
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let guard = |f: &mut dyn FnMut() -> Outcome| -> Outcome {
        catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        })
    };
    let mut emit = |id: usize, name: &'static str, o: Outcome| {
        match &o {
            Ok(d) => println!("[PASS] {id}. {name}: {d}"),
            Err(d) => println!("[FAIL] {id}. {name}: {d}"),
        }
        results.push((id, name, o));
    };

    emit(1, "loss oracle suite", guard(&mut loss_oracles));
    emit(2, "gradient checks", guard(&mut gradient_checks));
    emit(3, "initialization invariant", guard(&mut init_invariant));
    emit(4, "protocol invariants", guard(&mut protocol_invariants));
    emit(5, "similarity statistics", guard(&mut similarity_oracle));

    let mut toy = Toy::new(tmp.path());
    let grid = catch_unwind(AssertUnwindSafe(|| run_grid(&mut toy)));
    match &grid {
        Ok(grid) => {
            emit(6, "directional forgetting", guard(&mut || directional_forgetting(grid)));
            emit(7, "ablation direction", guard(&mut || ablation_direction(grid)));
        }
        Err(_) => {
            emit(6, "directional forgetting", Err("toy training panicked".into()));
            emit(7, "ablation direction", Err("toy training panicked".into()));
        }
    }
    emit(8, "mIoU engine", guard(&mut miou_engine));
    match &grid {
        Ok(grid) => emit(9, "determinism and persistence", guard(&mut || determinism(&mut toy, grid))),
        Err(_) => emit(9, "determinism and persistence", Err("toy training panicked".into())),
    }

    let failed: Vec<String> = results
        .iter()
        .filter(|r| r.2.is_err())
        .map(|r| format!("{}. {}", r.0, r.1))
        .collect();
    println!(
        "acceptance: {}/{} criteria passed",
        results.len() - failed.len(),
        results.len()
    );
    if !failed.is_empty() {
        println!("failed: {}", failed.join(", "));
        std::process::exit(1);
    }
}
