//! Multi-step incremental training.
//!
//! Each step snapshots the previous model as a frozen teacher, grows the
//! decoder head for the new classes and optimizes the weighted objective
//! with SGD under a polynomial learning-rate decay that restarts per step.

mod augment;
mod schedule;
mod sgd;

use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use augment::{
    apply as apply_augment, augment, hflip_image, hflip_mask, resize_image, resize_mask, sample_params,
    AugmentParams, SCALE_RANGE,
};
pub use schedule::poly_lr;
pub use sgd::{clip_grad_norm, Sgd};

use crate::losses::{
    contrastive_distillation_with_grad, contrastive_patch_with_grad, patch_l1_with_grad, patch_l2_with_grad,
    total_loss, unbiased_cross_entropy_with_grad, unbiased_kd_with_grad, ClassPartition, LossComponents,
    LossWeights,
};
use crate::model::{load_checkpoint, save_checkpoint, FrozenModel, GrowVariant, Model, ModelConfig, ModelGrads};
use crate::protocol::{load_mask_for_step, StepDataset, TaskSequence, IGNORE};
use crate::{io, Error, LabelGrid, Result, RgbImage};

/// Weight of the feature-imitation terms in the `mib+l1` / `mib+l2` ablations.
/// Both sum over patches and channels, so the weight is small.
pub const IMITATION_WEIGHT: f64 = 1e-3;

pub const TRAIN_LOG: &str = "train_log.jsonl";

/// Loss configurations of the ablation grid.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "ft")]
    Ft,
    #[serde(rename = "mib")]
    Mib,
    #[default]
    #[serde(rename = "tiss")]
    Tiss,
    #[serde(rename = "mib+l1")]
    MibL1,
    #[serde(rename = "mib+l2")]
    MibL2,
    #[serde(rename = "mib+cd")]
    MibCd,
    #[serde(rename = "mib+ct")]
    MibCt,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Ft,
        Method::Mib,
        Method::Tiss,
        Method::MibL1,
        Method::MibL2,
        Method::MibCd,
        Method::MibCt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Ft => "ft",
            Method::Mib => "mib",
            Method::Tiss => "tiss",
            Method::MibL1 => "mib+l1",
            Method::MibL2 => "mib+l2",
            Method::MibCd => "mib+cd",
            Method::MibCt => "mib+ct",
        }
    }

    /// Fine-tuning uses plain cross-entropy; everything else re-buckets.
    pub fn unbiased(self) -> bool {
        self != Method::Ft
    }

    /// Weights for this method; KD is weighted 30 when classes arrive over
    /// several incremental steps and 10 when they arrive at once.
    pub fn weights(self, seq: &TaskSequence) -> LossWeights {
        let kd = if seq.is_sequential() { 30.0 } else { 10.0 };
        let mib = LossWeights {
            w_unce: 1.0,
            w_unkd: kd,
            w_cd: 0.0,
            w_ct: 0.0,
            w_l1: 0.0,
            w_l2: 0.0,
        };
        match self {
            Method::Ft => LossWeights { w_unkd: 0.0, ..mib },
            Method::Mib => mib,
            Method::Tiss => LossWeights {
                w_cd: 0.1,
                w_ct: 0.1,
                ..mib
            },
            Method::MibL1 => LossWeights {
                w_l1: IMITATION_WEIGHT,
                ..mib
            },
            Method::MibL2 => LossWeights {
                w_l2: IMITATION_WEIGHT,
                ..mib
            },
            Method::MibCd => LossWeights { w_cd: 0.1, ..mib },
            Method::MibCt => LossWeights { w_ct: 0.1, ..mib },
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            let known: Vec<_> = Method::ALL.iter().map(|m| m.name()).collect();
            Error::Usage(format!("unknown method '{s}' (known: {})", known.join(", ")))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_first_step: f64,
    pub lr_later_steps: f64,
    pub poly_power: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub crop_size: usize,
    pub method: Method,
    /// Overrides the method's weights when set.
    pub weights: Option<LossWeights>,
    pub seed: u64,
    pub grad_clip: f64,
    pub grow_variant: GrowVariant,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_first_step: 1e-2,
            lr_later_steps: 1e-3,
            poly_power: 0.9,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 20,
            batch_size: 8,
            crop_size: 64,
            method: Method::Tiss,
            weights: None,
            seed: 0,
            grad_clip: 10.0,
            grow_variant: GrowVariant::ProbabilityPreserving,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.into()));
        if !(self.lr_first_step > 0.0 && self.lr_later_steps > 0.0) {
            return fail("learning rates must be positive");
        }
        if !(self.poly_power > 0.0) {
            return fail("poly_power must be positive");
        }
        if self.epochs == 0 || self.batch_size == 0 || self.crop_size == 0 {
            return fail("epochs, batch_size and crop_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return fail("momentum must lie in [0, 1) and weight_decay must be non-negative");
        }
        if !(self.grad_clip > 0.0) {
            return fail("grad_clip must be positive");
        }
        if let Some(w) = &self.weights {
            w.validate()?;
        }
        Ok(())
    }

    pub fn base_lr(&self, step: usize) -> f64 {
        if step == 0 {
            self.lr_first_step
        } else {
            self.lr_later_steps
        }
    }

    pub fn resolved_weights(&self, seq: &TaskSequence) -> LossWeights {
        self.weights.unwrap_or_else(|| self.method.weights(seq))
    }

    pub fn plan(&self, seq: &TaskSequence, step: usize) -> StepPlan {
        StepPlan {
            step,
            partition: seq.partition(step),
            weights: self.resolved_weights(seq),
            base_lr: self.base_lr(step),
            unbiased: self.method.unbiased(),
        }
    }
}

/// Everything one step's optimization needs besides the data and models.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepPlan {
    pub step: usize,
    pub partition: ClassPartition,
    pub weights: LossWeights,
    pub base_lr: f64,
    pub unbiased: bool,
}

/// Mean loss components over one epoch's batches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    pub step: usize,
    pub epoch: usize,
    /// Learning rate of the epoch's first iteration.
    pub lr: f64,
    pub total: f64,
    #[serde(flatten)]
    pub losses: LossComponents,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    pub step_index: usize,
    pub checkpoint_ref: PathBuf,
    pub per_epoch_losses: Vec<EpochLosses>,
    pub wall_time: f64,
}

/// Derives an independent seed for one component of a run.
pub fn sub_seed(seed: u64, parts: &[u64]) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    parts.iter().fold(mix(seed), |acc, &p| mix(acc ^ mix(p)))
}

const TAG_INIT: u64 = 1;
const TAG_SHUFFLE: u64 = 2;
const TAG_AUGMENT: u64 = 3;

fn add_grad(slot: &mut Option<Array2<f32>>, g: Array2<f32>, weight: f64) {
    if weight == 0.0 {
        return;
    }
    let g = g * weight as f32;
    *slot = Some(match slot.take() {
        Some(prev) => prev + g,
        None => g,
    });
}

/// Loss components and parameter gradients of the weighted objective on
/// one sample. `None` when every pixel is ignored.
pub fn sample_objective(
    student: &Model<f32>,
    teacher: Option<&Model<f32>>,
    image: &RgbImage,
    target: &LabelGrid,
    plan: &StepPlan,
) -> Result<Option<(LossComponents, ModelGrads<f32>)>> {
    if target.iter().all(|&v| v == IGNORE) {
        return Ok(None);
    }
    let w = &plan.weights;
    let fwd = student.forward(&image.view())?;
    let ce_part = if plan.unbiased {
        plan.partition
    } else {
        ClassPartition::new(1, plan.partition.n_all() - 1)?
    };
    let (unce, g) = unbiased_cross_entropy_with_grad(&fwd.logits, target, &ce_part)?;
    let mut d_logits = g * w.w_unce as f32;
    let n_layers = fwd.states.n_layers();
    let mut d_states: Vec<Option<Array2<f32>>> = vec![None; n_layers];

    let (ct, d_last, d_first) = contrastive_patch_with_grad(&fwd.states.last().view(), &fwd.states.first().view())?;
    add_grad(&mut d_states[n_layers - 1], d_last, w.w_ct);
    add_grad(&mut d_states[0], d_first, w.w_ct);
    let mut comps = LossComponents {
        unce: Some(unce as f64),
        ct: Some(ct as f64),
        ..Default::default()
    };

    if let Some(teacher) = teacher {
        let tf = teacher.forward(&image.view())?;
        let (kd, g) = unbiased_kd_with_grad(&fwd.logits, &tf.logits, &plan.partition, Some(target))?;
        d_logits.scaled_add(w.w_unkd as f32, &g);
        let (cd, g) = contrastive_distillation_with_grad(&fwd.states.last().view(), &tf.states.last().view())?;
        add_grad(&mut d_states[n_layers - 1], g, w.w_cd);
        comps.unkd = Some(kd as f64);
        comps.cd = Some(cd as f64);
        if w.w_l1 > 0.0 {
            let (v, gs) = patch_l1_with_grad(&fwd.states, &tf.states)?;
            for (slot, g) in d_states.iter_mut().zip(gs) {
                add_grad(slot, g, w.w_l1);
            }
            comps.l1 = Some(v as f64);
        }
        if w.w_l2 > 0.0 {
            let (v, gs) = patch_l2_with_grad(&fwd.states, &tf.states)?;
            for (slot, g) in d_states.iter_mut().zip(gs) {
                add_grad(slot, g, w.w_l2);
            }
            comps.l2 = Some(v as f64);
        }
    }
    let grads = student.backward(&fwd, Some(&d_logits), &d_states)?;
    Ok(Some((comps, grads)))
}

#[derive(Default)]
struct Running {
    sums: [f64; 6],
    seen: [bool; 6],
    total: f64,
    n: usize,
}

impl Running {
    fn fields(c: &LossComponents) -> [Option<f64>; 6] {
        [c.unce, c.unkd, c.cd, c.ct, c.l1, c.l2]
    }

    fn add(&mut self, c: &LossComponents, total: f64) {
        for (i, v) in Self::fields(c).into_iter().enumerate() {
            if let Some(v) = v {
                self.sums[i] += v;
                self.seen[i] = true;
            }
        }
        self.total += total;
        self.n += 1;
    }

    fn mean(&self) -> (LossComponents, f64) {
        let n = self.n.max(1) as f64;
        let f = |i: usize| self.seen[i].then(|| self.sums[i] / n);
        let c = LossComponents {
            unce: f(0),
            unkd: f(1),
            cd: f(2),
            ct: f(3),
            l1: f(4),
            l2: f(5),
        };
        (c, self.total / n)
    }
}

/// Optimizes `student` on in-memory samples whose masks are already
/// remapped for the step. A teacher is required exactly when `plan.step > 0`.
/// The learning rate is not validated here, so a zero rate is a valid no-op
/// update apart from weight decay.
pub fn fit(
    student: &mut Model<f32>,
    teacher: Option<&FrozenModel<f32>>,
    samples: &[(RgbImage, LabelGrid)],
    plan: &StepPlan,
    cfg: &TrainConfig,
) -> Result<Vec<EpochLosses>> {
    if (plan.step > 0) != teacher.is_some() {
        return Err(Error::Config(format!(
            "step {} {} a teacher model",
            plan.step,
            if plan.step > 0 { "requires" } else { "cannot use" }
        )));
    }
    if student.n_classes() != plan.partition.n_all() {
        return Err(Error::Config(format!(
            "student predicts {} classes, step {} needs {}",
            student.n_classes(),
            plan.step,
            plan.partition.n_all()
        )));
    }
    if let Some(t) = teacher {
        if t.n_classes() != plan.partition.n_old() {
            return Err(Error::Config("teacher does not cover the old classes".into()));
        }
    }
    if samples.is_empty() {
        return Err(Error::Data(format!("step {} has no training samples", plan.step)));
    }
    if cfg.crop_size != student.config().image_size {
        return Err(Error::Config(format!(
            "crop_size {} must equal the model input size {}",
            cfg.crop_size,
            student.config().image_size
        )));
    }

    let teacher_model: Option<&Model<f32>> = teacher.map(|t| &**t);
    let batches_per_epoch = samples.len().div_ceil(cfg.batch_size);
    let max_iter = cfg.epochs * batches_per_epoch;
    let mut opt = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut iter = 0;
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, &[TAG_SHUFFLE, plan.step as u64, epoch as u64]));
        order.shuffle(&mut rng);
        let epoch_lr = poly_lr(plan.base_lr, iter, max_iter, cfg.poly_power)?;
        let mut running = Running::default();

        for batch in order.chunks(cfg.batch_size) {
            let lr = poly_lr(plan.base_lr, iter, max_iter, cfg.poly_power)?;
            iter += 1;
            let student_ref = &*student;
            let results: Vec<Result<Option<(LossComponents, ModelGrads<f32>)>>> = batch
                .par_iter()
                .map(|&idx| {
                    let (image, mask) = &samples[idx];
                    if cfg.augment {
                        let seed = sub_seed(cfg.seed, &[TAG_AUGMENT, plan.step as u64, epoch as u64, idx as u64]);
                        let mut rng = ChaCha8Rng::seed_from_u64(seed);
                        let (image, mask) = augment(image, mask, cfg.crop_size, &mut rng);
                        sample_objective(student_ref, teacher_model, &image, &mask, plan)
                    } else {
                        sample_objective(student_ref, teacher_model, image, mask, plan)
                    }
                })
                .collect();

            let mut grads: Option<ModelGrads<f32>> = None;
            let mut batch_losses = Running::default();
            for r in results {
                if let Some((c, g)) = r? {
                    batch_losses.add(&c, 0.0);
                    match grads.as_mut() {
                        Some(acc) => acc.add_assign(&g),
                        None => grads = Some(g),
                    }
                }
            }
            let Some(mut grads) = grads else { continue };
            grads.scale(1.0 / batch_losses.n as f32);
            let (comps, _) = batch_losses.mean();
            let total = total_loss(&comps, &plan.weights, plan.step)?;
            if !total.is_finite() || !grads.is_finite() {
                let dump = serde_json::json!({
                    "step": plan.step,
                    "epoch": epoch,
                    "iteration": iter - 1,
                    "lr": lr,
                    "total": total.to_string(),
                    "losses": comps,
                    "grad_norm": grads.global_norm().to_string(),
                    "batch": batch,
                });
                return Err(Error::Diverged(dump.to_string()));
            }
            clip_grad_norm(&mut grads, cfg.grad_clip);
            opt.step(student, &grads, lr);
            running.add(&comps, total);
        }

        let (losses, total) = running.mean();
        log::info!("step {} epoch {epoch}: loss {total:.4} lr {epoch_lr:.2e}", plan.step);
        log.push(EpochLosses {
            step: plan.step,
            epoch,
            lr: epoch_lr,
            total,
            losses,
        });
    }
    Ok(log)
}

/// Reads a step's images and remapped masks, resized to `size` if needed.
pub fn load_step_samples(step: &StepDataset, seq: &TaskSequence, size: usize) -> Result<Vec<(RgbImage, LabelGrid)>> {
    step.records
        .par_iter()
        .map(|r| {
            let image = io::read_rgb(&r.image_ref)?;
            let mask = load_mask_for_step(r, step, seq)?;
            if mask.dim() != (image.dim().0, image.dim().1) {
                return Err(Error::Data(format!("{}: image and mask sizes differ", r.id)));
            }
            Ok((resize_image(&image, (size, size)), resize_mask(&mask, (size, size))))
        })
        .collect()
}

/// Where a run's artifacts go and what it trains.
#[derive(Debug, Clone, Copy)]
pub struct RunContext<'a> {
    pub seq: &'a TaskSequence,
    pub model: &'a ModelConfig,
    pub out_dir: &'a Path,
}

pub fn checkpoint_path(out_dir: &Path, step: usize) -> PathBuf {
    out_dir.join(format!("step{step}.ckpt"))
}

/// Trains one step from disk and writes `step{t}.ckpt` plus the epoch log.
pub fn train_step(
    ctx: &RunContext<'_>,
    step: &StepDataset,
    prev_checkpoint: Option<&Path>,
    cfg: &TrainConfig,
) -> Result<StepResult> {
    cfg.validate()?;
    let samples = load_step_samples(step, ctx.seq, ctx.model.image_size)?;
    train_step_on(ctx, step.step_index, &samples, prev_checkpoint, cfg)
}

/// [`train_step`] on samples already in memory.
pub fn train_step_on(
    ctx: &RunContext<'_>,
    t: usize,
    samples: &[(RgbImage, LabelGrid)],
    prev_checkpoint: Option<&Path>,
    cfg: &TrainConfig,
) -> Result<StepResult> {
    let started = Instant::now();
    cfg.validate()?;
    if t >= ctx.seq.n_steps() {
        return Err(Error::Config(format!("step {t} is outside the {}-step schedule", ctx.seq.n_steps())));
    }
    let (mut student, teacher) = match (t, prev_checkpoint) {
        (0, None) => {
            let seed = sub_seed(cfg.seed, &[TAG_INIT, ctx.model.seed]);
            (Model::new(ctx.model.clone(), ctx.seq.n_seen(0), seed)?, None)
        }
        (0, Some(_)) => return Err(Error::Config("step 0 starts from scratch; no previous checkpoint".into())),
        (_, None) => return Err(Error::Config(format!("step {t} requires the step {} checkpoint", t - 1))),
        (_, Some(path)) => {
            let ck = load_checkpoint(path, Some(ctx.model))?;
            if ck.header.step_index != t - 1 || &ck.header.sequence != ctx.seq {
                return Err(Error::Config(format!(
                    "{} holds step {} of a different or mismatched run; step {t} needs step {}",
                    path.display(),
                    ck.header.step_index,
                    t - 1
                )));
            }
            let teacher = ck.model.snapshot();
            let mut student = teacher.thaw();
            student.grow_head(ctx.seq.step_sizes[t], cfg.grow_variant)?;
            (student, Some(teacher))
        }
    };

    fs::create_dir_all(ctx.out_dir).map_err(|e| Error::io(ctx.out_dir, e))?;
    let plan = cfg.plan(ctx.seq, t);
    let per_epoch_losses = match fit(&mut student, teacher.as_ref(), samples, &plan, cfg) {
        Ok(log) => log,
        Err(Error::Diverged(dump)) => {
            let path = ctx.out_dir.join(format!("diverged_step{t}.json"));
            fs::write(&path, &dump).map_err(|e| Error::io(&path, e))?;
            return Err(Error::Diverged(format!("non-finite loss at step {t}; dump at {}", path.display())));
        }
        Err(e) => return Err(e),
    };

    let checkpoint_ref = checkpoint_path(ctx.out_dir, t);
    save_checkpoint(&checkpoint_ref, &student, ctx.seq, t)?;
    let log_path = ctx.out_dir.join(TRAIN_LOG);
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    for rec in &per_epoch_losses {
        writeln!(f, "{}", serde_json::to_string(rec)?).map_err(|e| Error::io(&log_path, e))?;
    }
    Ok(StepResult {
        step_index: t,
        checkpoint_ref,
        per_epoch_losses,
        wall_time: started.elapsed().as_secs_f64(),
    })
}

/// Trains every step in order, each from the previous step's checkpoint.
pub fn run_incremental(ctx: &RunContext<'_>, datasets: &[StepDataset], cfg: &TrainConfig) -> Result<Vec<StepResult>> {
    if datasets.len() != ctx.seq.n_steps() || datasets.iter().enumerate().any(|(t, d)| d.step_index != t) {
        return Err(Error::Protocol(format!(
            "expected one dataset per step for {} steps, in order",
            ctx.seq.n_steps()
        )));
    }
    let mut results: Vec<StepResult> = Vec::with_capacity(datasets.len());
    for step in datasets {
        let prev = results.last().map(|r| r.checkpoint_ref.clone());
        results.push(train_step(ctx, step, prev.as_deref(), cfg)?);
    }
    Ok(results)
}
