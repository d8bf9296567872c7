//! Confusion matrices and grouped mIoU tables.

use std::fmt::Write as _;

use ndarray::{Array2, Zip};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::model::Model;
use crate::protocol::{TaskSequence, BACKGROUND, IGNORE};
use crate::{Error, LabelGrid, Result, RgbImage};

/// Pixel counts with rows indexed by ground truth and columns by prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Array2<u64>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        Self {
            counts: Array2::zeros((n_classes, n_classes)),
        }
    }

    pub fn n_classes(&self) -> usize {
        self.counts.nrows()
    }

    pub fn counts(&self) -> &Array2<u64> {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.sum()
    }

    /// Adds every pixel whose target is not ignore.
    pub fn accumulate(&mut self, pred: &LabelGrid, target: &LabelGrid) -> Result<()> {
        if pred.dim() != target.dim() {
            return Err(Error::Metric(format!(
                "prediction {:?} and target {:?} differ in shape",
                pred.dim(),
                target.dim()
            )));
        }
        let n = self.n_classes();
        let mut bad = None;
        Zip::from(pred).and(target).for_each(|&p, &t| {
            if t == IGNORE || bad.is_some() {
                return;
            }
            if p as usize >= n || t as usize >= n {
                bad = Some((p, t));
                return;
            }
            self.counts[[t as usize, p as usize]] += 1;
        });
        match bad {
            Some((p, t)) => Err(Error::Metric(format!(
                "label pair (target {t}, prediction {p}) outside {n} classes"
            ))),
            None => Ok(()),
        }
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.n_classes() != self.n_classes() {
            return Err(Error::Metric("cannot merge matrices of different sizes".into()));
        }
        self.counts += &other.counts;
        Ok(())
    }

    /// IoU of one class; `None` when the class has empty union.
    pub fn iou(&self, class: usize) -> Option<f64> {
        self.iou_fraction(class).map(|(tp, union)| tp as f64 / union as f64)
    }

    /// Mean IoU over `group`, skipping zero-union classes.
    pub fn miou(&self, group: &[usize]) -> Result<f64> {
        if let Some(&c) = group.iter().find(|&&c| c >= self.n_classes()) {
            return Err(Error::Metric(format!("class {c} outside {} classes", self.n_classes())));
        }
        let fracs: Vec<(u64, u64)> = group.iter().filter_map(|&c| self.iou_fraction(c)).collect();
        if fracs.is_empty() {
            return Err(Error::Metric("no class in the group has any pixels; mIoU is undefined".into()));
        }
        Ok(mean_of_fractions(&fracs))
    }

    fn iou_fraction(&self, class: usize) -> Option<(u64, u64)> {
        let tp = self.counts[[class, class]];
        let union = self.counts.row(class).sum() + self.counts.column(class).sum() - tp;
        (union > 0).then_some((tp, union))
    }
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Mean of `num / den` fractions. Summed exactly while the common
/// denominator fits in 128 bits, so small cases round only once.
fn mean_of_fractions(fracs: &[(u64, u64)]) -> f64 {
    let exact = fracs.iter().try_fold((0u128, 1u128), |(n, d), &(a, b)| {
        let (a, b) = (a as u128, b as u128);
        let g = gcd(d, b);
        let den = (d / g).checked_mul(b)?;
        let num = n.checked_mul(b / g)?.checked_add(a.checked_mul(d / g)?)?;
        let r = gcd(num, den).max(1);
        Some((num / r, den / r))
    });
    match exact.and_then(|(n, d)| Some((n, d.checked_mul(fracs.len() as u128)?))) {
        Some((n, d)) => {
            let g = gcd(n, d).max(1);
            (n / g) as f64 / (d / g) as f64
        }
        None => fracs.iter().map(|&(a, b)| a as f64 / b as f64).sum::<f64>() / fracs.len() as f64,
    }
}

/// Predicts every image and accumulates against its (already remapped) mask.
pub fn evaluate(model: &Model<f32>, samples: &[(RgbImage, LabelGrid)]) -> Result<ConfusionMatrix> {
    let n = model.n_classes();
    if samples.is_empty() {
        return Err(Error::Metric("no evaluation images".into()));
    }
    let parts: Vec<Result<ConfusionMatrix>> = samples
        .par_iter()
        .map(|(image, mask)| {
            let mut cm = ConfusionMatrix::new(n);
            cm.accumulate(&model.predict(&image.view())?, mask)?;
            Ok(cm)
        })
        .collect();
    let mut cm = ConfusionMatrix::new(n);
    for p in parts {
        cm.merge(&p?)?;
    }
    Ok(cm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassIou {
    pub class_id: u8,
    pub class_name: String,
    pub iou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMiou {
    pub name: String,
    pub classes: Vec<u8>,
    pub miou: Option<f64>,
}

/// Per-class IoU and group means after step `step`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub step: usize,
    pub classes: Vec<ClassIou>,
    pub groups: Vec<GroupMiou>,
}

impl Report {
    pub fn group(&self, name: &str) -> Option<f64> {
        self.groups.iter().find(|g| g.name == name).and_then(|g| g.miou)
    }

    pub fn to_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |v| format!("{v:.6}"));
        let mut out = String::from("step,class_id,class_name,iou\n");
        for c in &self.classes {
            writeln!(out, "{},{},{},{}", self.step, c.class_id, c.class_name, fmt(c.iou)).unwrap();
        }
        for g in &self.groups {
            writeln!(out, "group:{},,,{}", g.name, fmt(g.miou)).unwrap();
        }
        out
    }

    pub fn to_text(&self) -> String {
        let pct = |v: Option<f64>| v.map_or_else(|| "   n/a".to_string(), |v| format!("{:6.2}", 100.0 * v));
        let width = self.classes.iter().map(|c| c.class_name.len()).max().unwrap_or(5).max(8);
        let mut out = format!("mIoU after step {}\n", self.step);
        for c in &self.classes {
            writeln!(out, "  {:>3} {:<width$} {}", c.class_id, c.class_name, pct(c.iou)).unwrap();
        }
        let header: Vec<String> = self.groups.iter().map(|g| format!("{:>8}", g.name)).collect();
        let values: Vec<String> = self.groups.iter().map(|g| format!("{:>8}", pct(g.miou))).collect();
        writeln!(out, "  {}", header.join(" ")).unwrap();
        writeln!(out, "  {}", values.join(" ")).unwrap();
        out
    }
}

/// Groups: `old` is background plus the first step's classes, `new` the
/// classes added later (when any), `all` every class seen so far and
/// `old_fg` the first step's classes without background.
pub fn report(cm: &ConfusionMatrix, seq: &TaskSequence, step: usize) -> Result<Report> {
    let n = seq.n_seen(step);
    if cm.n_classes() != n {
        return Err(Error::Metric(format!(
            "matrix covers {} classes, step {step} has {n}",
            cm.n_classes()
        )));
    }
    let classes = (0..n as u8)
        .map(|c| ClassIou {
            class_id: c,
            class_name: seq.label_space.name(c).to_string(),
            iou: cm.iou(c as usize),
        })
        .collect();
    let first: Vec<u8> = seq.new_classes(0).collect();
    let mut groups = vec![("old", std::iter::once(BACKGROUND).chain(first.iter().copied()).collect::<Vec<_>>())];
    let later: Vec<u8> = (1..=step).flat_map(|t| seq.new_classes(t)).collect();
    if !later.is_empty() {
        groups.push(("new", later));
    }
    groups.push(("all", (0..n as u8).collect()));
    groups.push(("old_fg", first));
    let groups = groups
        .into_iter()
        .map(|(name, classes)| {
            let ids: Vec<usize> = classes.iter().map(|&c| c as usize).collect();
            GroupMiou {
                name: name.to_string(),
                miou: cm.miou(&ids).ok(),
                classes,
            }
        })
        .collect();
    Ok(Report { step, classes, groups })
}
