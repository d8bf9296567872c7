//! Incremental label spaces, task schedules and per-step dataset splits.

mod manifest;
mod toy;

use std::collections::BTreeSet;
use std::fmt;
use std::ops::Range;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::losses::ClassPartition;
use crate::{io, Error, LabelGrid, Result};

pub use manifest::{load_dataset_dir, write_class_names, Dataset, ManifestStep, TaskManifest};
pub use toy::{generate_toy_dataset, render_toy_sample, toy_class_names, toy_samples, ToySpec};

pub const BACKGROUND: u8 = 0;
pub const IGNORE: u8 = 255;

/// Schedules with a name in the literature; any `A-B` string that tiles the
/// class count is accepted as well.
pub const KNOWN_SCHEDULES: [&str; 6] = ["19-1", "15-5", "15-1", "100-50", "100-10", "50-50"];

/// Foreground class names; index `i` in the list is class id `i + 1`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSpace {
    class_names: Vec<String>,
}

impl LabelSpace {
    pub fn new(class_names: Vec<String>) -> Result<Self> {
        if class_names.len() >= IGNORE as usize {
            return Err(Error::Schedule(format!(
                "at most {} foreground classes fit below the ignore index, got {}",
                IGNORE - 1,
                class_names.len()
            )));
        }
        Ok(Self { class_names })
    }

    pub fn n_foreground(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn name(&self, class_id: u8) -> &str {
        match class_id {
            BACKGROUND => "background",
            IGNORE => "ignore",
            c => self
                .class_names
                .get(c as usize - 1)
                .map(String::as_str)
                .unwrap_or("unknown"),
        }
    }

    pub fn contains(&self, class_id: u8) -> bool {
        (class_id as usize) <= self.class_names.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Disjoint,
    Overlapped,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Disjoint => "disjoint",
            Mode::Overlapped => "overlapped",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "disjoint" => Ok(Mode::Disjoint),
            "overlapped" | "overlap" => Ok(Mode::Overlapped),
            other => Err(Error::Usage(format!(
                "unknown mode '{other}' (expected disjoint or overlapped)"
            ))),
        }
    }
}

/// Ordered class schedule. Step `t` introduces the classes in
/// [`TaskSequence::new_classes`], taken in label-space order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSequence {
    pub label_space: LabelSpace,
    pub step_sizes: Vec<usize>,
    pub mode: Mode,
}

pub fn build_task_sequence(
    class_names: Vec<String>,
    step_sizes: Vec<usize>,
    mode: Mode,
) -> Result<TaskSequence> {
    let label_space = LabelSpace::new(class_names)?;
    if step_sizes.is_empty() {
        return Err(Error::Schedule("schedule has no steps".into()));
    }
    if let Some(t) = step_sizes.iter().position(|&s| s == 0) {
        return Err(Error::Schedule(format!("step {t} adds no classes")));
    }
    let total: usize = step_sizes.iter().sum();
    if total != label_space.n_foreground() {
        return Err(Error::Schedule(format!(
            "step sizes {step_sizes:?} sum to {total}, but there are {} foreground classes",
            label_space.n_foreground()
        )));
    }
    Ok(TaskSequence {
        label_space,
        step_sizes,
        mode,
    })
}

/// Expands an `A-B` schedule: `A` classes first, then `B` at a time until
/// `n_classes` is exhausted ("15-1" over 20 classes is `[15, 1, 1, 1, 1, 1]`).
pub fn parse_schedule(schedule: &str, n_classes: usize) -> Result<Vec<usize>> {
    let usage = || {
        Error::Usage(format!(
            "unknown schedule '{schedule}' for {n_classes} classes; expected A-B with A + k*B = {n_classes} (known: {})",
            KNOWN_SCHEDULES.join(", ")
        ))
    };
    let (first, later) = schedule.split_once('-').ok_or_else(usage)?;
    let first: usize = first.trim().parse().map_err(|_| usage())?;
    let later: usize = later.trim().parse().map_err(|_| usage())?;
    if first == 0 || later == 0 || first > n_classes {
        return Err(usage());
    }
    let rest = n_classes - first;
    if !rest.is_multiple_of(later) {
        return Err(usage());
    }
    let mut sizes = vec![first];
    sizes.extend(std::iter::repeat_n(later, rest / later));
    Ok(sizes)
}

impl TaskSequence {
    pub fn n_steps(&self) -> usize {
        self.step_sizes.len()
    }

    /// Class ids introduced at step `t` (the set S_t).
    pub fn new_classes(&self, t: usize) -> Range<u8> {
        let start: usize = 1 + self.step_sizes[..t].iter().sum::<usize>();
        start as u8..(start + self.step_sizes[t]) as u8
    }

    /// Size of the label space after step `t`, background included.
    pub fn n_seen(&self, t: usize) -> usize {
        1 + self.step_sizes[..=t].iter().sum::<usize>()
    }

    pub fn partition(&self, t: usize) -> ClassPartition {
        let n_old = if t == 0 { 1 } else { self.n_seen(t - 1) };
        ClassPartition::new(n_old, self.step_sizes[t]).expect("step sizes are positive")
    }

    /// Step at which `class_id` is introduced; `None` for background/ignore.
    pub fn step_of(&self, class_id: u8) -> Option<usize> {
        (0..self.n_steps()).find(|&t| self.new_classes(t).contains(&class_id))
    }

    /// More than one incremental step after the first.
    pub fn is_sequential(&self) -> bool {
        self.n_steps() > 2
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub image_ref: PathBuf,
    pub mask_ref: PathBuf,
    pub present_classes: BTreeSet<u8>,
}

impl SampleRecord {
    pub fn from_mask(id: String, image_ref: PathBuf, mask_ref: PathBuf, mask: &LabelGrid) -> Self {
        Self {
            id,
            image_ref,
            mask_ref,
            present_classes: present_classes(mask),
        }
    }

    fn foreground(&self) -> impl Iterator<Item = u8> + '_ {
        self.present_classes.iter().copied().filter(|&c| c != BACKGROUND && c != IGNORE)
    }
}

pub fn present_classes(mask: &LabelGrid) -> BTreeSet<u8> {
    mask.iter().copied().filter(|&c| c != IGNORE).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepDataset {
    pub step_index: usize,
    pub records: Vec<SampleRecord>,
    /// S_t plus background.
    pub visible_classes: BTreeSet<u8>,
}

impl StepDataset {
    pub fn new(step_index: usize, records: Vec<SampleRecord>, seq: &TaskSequence) -> Self {
        let visible_classes = std::iter::once(BACKGROUND).chain(seq.new_classes(step_index)).collect();
        Self {
            step_index,
            records,
            visible_classes,
        }
    }
}

/// Assigns records to steps.
///
/// Overlapped: a record joins every step whose new classes it contains.
/// Disjoint: a record joins the single step at which all of its classes have
/// been seen, provided it contains one of that step's new classes.
pub fn split_dataset(records: &[SampleRecord], seq: &TaskSequence) -> Result<Vec<StepDataset>> {
    let mut per_step: Vec<Vec<SampleRecord>> = vec![Vec::new(); seq.n_steps()];
    for record in records {
        let mut steps = BTreeSet::new();
        for c in record.foreground() {
            let t = seq.step_of(c).ok_or_else(|| {
                Error::Data(format!("record {} contains class {c} outside the label space", record.id))
            })?;
            steps.insert(t);
        }
        match seq.mode {
            Mode::Overlapped => {
                for &t in &steps {
                    per_step[t].push(record.clone());
                }
            }
            Mode::Disjoint => {
                // The earliest step whose C_t covers every class is the latest
                // step among them, and it always holds one of the record's classes.
                if let Some(&t) = steps.iter().next_back() {
                    per_step[t].push(record.clone());
                }
            }
        }
    }
    per_step
        .into_iter()
        .enumerate()
        .map(|(t, recs)| {
            if recs.is_empty() {
                Err(Error::Protocol(format!(
                    "step {t} ({} mode) has no images containing its new classes {:?}",
                    seq.mode,
                    seq.new_classes(t)
                )))
            } else {
                Ok(StepDataset::new(t, recs, seq))
            }
        })
        .collect()
}

/// Keeps the step's new classes and the ignore index; every other class,
/// old or future, becomes background.
pub fn remap_mask(mask: &LabelGrid, step: &StepDataset, seq: &TaskSequence) -> Result<LabelGrid> {
    remap_to_classes(mask, seq, |c| step.visible_classes.contains(&c))
}

/// Evaluation-time remap for a model trained through step `t`: classes in
/// C_t keep their index, future classes become background.
pub fn remap_mask_seen(mask: &LabelGrid, seq: &TaskSequence, t: usize) -> Result<LabelGrid> {
    let n_seen = seq.n_seen(t);
    remap_to_classes(mask, seq, |c| (c as usize) < n_seen)
}

fn remap_to_classes(mask: &LabelGrid, seq: &TaskSequence, keep: impl Fn(u8) -> bool) -> Result<LabelGrid> {
    let n = seq.label_space.n_foreground();
    if let Some(&bad) = mask.iter().find(|&&c| c != IGNORE && c as usize > n) {
        return Err(Error::Data(format!(
            "mask value {bad} is outside the label space of {n} classes"
        )));
    }
    Ok(mask.mapv(|c| if c == IGNORE || keep(c) { c } else { BACKGROUND }))
}

pub fn load_mask_for_step(record: &SampleRecord, step: &StepDataset, seq: &TaskSequence) -> Result<LabelGrid> {
    remap_mask(&io::read_mask(&record.mask_ref)?, step, seq)
}
