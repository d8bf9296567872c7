//! Dataset directories and task manifests on disk.
//!
//! A dataset directory holds `images/<id>.png` (8-bit RGB), `masks/<id>.png`
//! (8-bit indexed, 255 = ignore) and `classes.json` listing the foreground
//! class names in id order.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{build_task_sequence, split_dataset, Mode, SampleRecord, StepDataset, TaskSequence};
use crate::{io, Error, Result};

const CLASSES_FILE: &str = "classes.json";

#[derive(Serialize, Deserialize)]
struct ClassesFile {
    class_names: Vec<String>,
}

pub fn write_class_names(dir: &Path, class_names: &[String]) -> Result<()> {
    let path = dir.join(CLASSES_FILE);
    let body = serde_json::to_string_pretty(&ClassesFile {
        class_names: class_names.to_vec(),
    })?;
    fs::write(&path, body + "\n").map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub class_names: Vec<String>,
    pub records: Vec<SampleRecord>,
}

/// Scans a dataset directory; records are sorted by id and their
/// `present_classes` are read from the masks.
pub fn load_dataset_dir(root: &Path) -> Result<Dataset> {
    let classes_path = root.join(CLASSES_FILE);
    let text = fs::read_to_string(&classes_path).map_err(|e| Error::io(&classes_path, e))?;
    let classes: ClassesFile = serde_json::from_str(&text)?;

    let masks_dir = root.join("masks");
    let mut ids: Vec<String> = fs::read_dir(&masks_dir)
        .map_err(|e| Error::io(&masks_dir, e))?
        .filter_map(|entry| {
            let path = entry.ok()?.path();
            (path.extension()? == "png").then(|| path.file_stem().map(|s| s.to_string_lossy().into_owned()))?
        })
        .collect();
    ids.sort();

    let mut records = Vec::with_capacity(ids.len());
    for id in ids {
        let image_ref = root.join("images").join(format!("{id}.png"));
        let mask_ref = masks_dir.join(format!("{id}.png"));
        if !image_ref.exists() {
            return Err(Error::Data(format!("mask {} has no matching image", mask_ref.display())));
        }
        let mask = io::read_mask(&mask_ref)?;
        if let Some(&bad) = mask
            .iter()
            .find(|&&c| c != super::IGNORE && c as usize > classes.class_names.len())
        {
            return Err(Error::Data(format!(
                "{}: value {bad} outside {} classes",
                mask_ref.display(),
                classes.class_names.len()
            )));
        }
        records.push(SampleRecord::from_mask(id, image_ref, mask_ref, &mask));
    }
    Ok(Dataset {
        root: root.to_path_buf(),
        class_names: classes.class_names,
        records,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestStep {
    pub step: usize,
    pub new_classes: Vec<u8>,
    pub records: Vec<SampleRecord>,
}

/// Serialized task split; field order is fixed so manifests diff cleanly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskManifest {
    pub class_names: Vec<String>,
    pub step_sizes: Vec<usize>,
    pub mode: Mode,
    pub seed: u64,
    pub steps: Vec<ManifestStep>,
}

impl TaskManifest {
    pub fn build(dataset: &Dataset, step_sizes: Vec<usize>, mode: Mode, seed: u64) -> Result<Self> {
        let seq = build_task_sequence(dataset.class_names.clone(), step_sizes, mode)?;
        let steps = split_dataset(&dataset.records, &seq)?
            .into_iter()
            .map(|s| ManifestStep {
                step: s.step_index,
                new_classes: seq.new_classes(s.step_index).collect(),
                records: s.records,
            })
            .collect();
        Ok(Self {
            class_names: seq.label_space.class_names().to_vec(),
            step_sizes: seq.step_sizes,
            mode,
            seed,
            steps,
        })
    }

    pub fn sequence(&self) -> Result<TaskSequence> {
        build_task_sequence(self.class_names.clone(), self.step_sizes.clone(), self.mode)
    }

    pub fn step_datasets(&self) -> Result<Vec<StepDataset>> {
        let seq = self.sequence()?;
        if self.steps.len() != seq.n_steps() {
            return Err(Error::Protocol(format!(
                "manifest lists {} steps but the schedule has {}",
                self.steps.len(),
                seq.n_steps()
            )));
        }
        Ok(self
            .steps
            .iter()
            .map(|s| StepDataset::new(s.step, s.records.clone(), &seq))
            .collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let body = serde_json::to_string_pretty(self)?;
        fs::write(path, body + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
