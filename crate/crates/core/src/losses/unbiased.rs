//! Unbiased cross-entropy and unbiased knowledge distillation.
//!
//! Both losses re-bucket background probability to account for the fact that
//! background in the current ground truth (or in the teacher's view) hides
//! classes the other side knows individually.

use ndarray::{Array1, Array3, ArrayView1, Axis, Zip};

use super::{log_sum_exp, ClassPartition};
use crate::model::SegLogits;
use crate::protocol::{BACKGROUND, IGNORE};
use crate::{Error, LabelGrid, Real, Result};

pub fn unbiased_cross_entropy<T: Real>(logits: &SegLogits<T>, target: &LabelGrid, part: &ClassPartition) -> Result<T> {
    Ok(unbiased_cross_entropy_with_grad(logits, target, part)?.0)
}

/// Mean over non-ignored pixels of `-log q̃(y)`, where `q̃(b)` sums the
/// probabilities of all old classes and `q̃(c) = p(c)` otherwise. With only
/// background as old class this is the standard cross-entropy.
pub fn unbiased_cross_entropy_with_grad<T: Real>(
    logits: &SegLogits<T>,
    target: &LabelGrid,
    part: &ClassPartition,
) -> Result<(T, Array3<T>)> {
    let (h, w, c) = logits.grid.dim();
    if c != part.n_all() {
        return Err(Error::Loss(format!("logits have {c} channels, label space has {}", part.n_all())));
    }
    if target.dim() != (h, w) {
        return Err(Error::Loss(format!("target {:?} does not match logits {:?}", target.dim(), (h, w))));
    }
    let n_old = part.n_old();
    let mut grad = Array3::<T>::zeros((h, w, c));
    let mut total = T::zero();
    let mut count = 0usize;
    for ((z, mut g), &y) in logits
        .grid
        .lanes(Axis(2))
        .into_iter()
        .zip(grad.lanes_mut(Axis(2)))
        .zip(target.iter())
    {
        if y == IGNORE {
            continue;
        }
        let y = y as usize;
        if y >= c {
            return Err(Error::Loss(format!("target class {y} outside {c} channels")));
        }
        count += 1;
        let lse = log_sum_exp(z.iter().copied());
        Zip::from(&mut g).and(&z).for_each(|g, &v| *g = (v - lse).exp());
        if y == BACKGROUND as usize {
            let lse_old = log_sum_exp(z.iter().take(n_old).copied());
            total += lse - lse_old;
            for k in 0..n_old {
                g[k] -= (z[k] - lse_old).exp();
            }
        } else {
            total += lse - z[y];
            g[y] -= T::one();
        }
    }
    if count == 0 {
        return Err(Error::Loss("every pixel is ignored; the mean is undefined".into()));
    }
    let n = T::from_usize(count).unwrap();
    grad.mapv_inplace(|v| v / n);
    Ok((total / n, grad))
}

/// The student's distribution re-bucketed onto the old classes: background
/// collects background plus every new class.
pub fn kd_rebucketed<T: Real>(student: ArrayView1<T>, part: &ClassPartition) -> Array1<T> {
    let lse = log_sum_exp(student.iter().copied());
    let bucket = std::iter::once(student[0]).chain(part.new_classes().map(|k| student[k]));
    let mut q = Array1::from_iter(part.old().map(|k| (student[k] - lse).exp()));
    q[0] = (log_sum_exp(bucket) - lse).exp();
    q
}

pub fn unbiased_kd<T: Real>(
    student: &SegLogits<T>,
    teacher: &SegLogits<T>,
    part: &ClassPartition,
    target: Option<&LabelGrid>,
) -> Result<T> {
    Ok(unbiased_kd_with_grad(student, teacher, part, target)?.0)
}

/// Mean over pixels of `-Σ_{c old} p_teacher(c) log q̂(c)` with `q̂` from
/// [`kd_rebucketed`]. Pixels marked ignore in `target` are skipped.
pub fn unbiased_kd_with_grad<T: Real>(
    student: &SegLogits<T>,
    teacher: &SegLogits<T>,
    part: &ClassPartition,
    target: Option<&LabelGrid>,
) -> Result<(T, Array3<T>)> {
    let (h, w, c) = student.grid.dim();
    let (th, tw, tc) = teacher.grid.dim();
    if c != part.n_all() || tc != part.n_old() {
        return Err(Error::Loss(format!(
            "channel mismatch: student {c} (expected {}), teacher {tc} (expected {})",
            part.n_all(),
            part.n_old()
        )));
    }
    if (th, tw) != (h, w) {
        return Err(Error::Loss("student and teacher logits differ in size".into()));
    }
    if let Some(t) = target {
        if t.dim() != (h, w) {
            return Err(Error::Loss("ignore mask does not match logits".into()));
        }
    }
    let n_old = part.n_old();
    let mut grad = Array3::<T>::zeros((h, w, c));
    let mut total = T::zero();
    let mut count = 0usize;
    let mut p_teacher = vec![T::zero(); n_old];
    for (i, ((zs, zt), mut g)) in student
        .grid
        .lanes(Axis(2))
        .into_iter()
        .zip(teacher.grid.lanes(Axis(2)))
        .zip(grad.lanes_mut(Axis(2)))
        .enumerate()
    {
        if let Some(t) = target {
            if t[[i / w, i % w]] == IGNORE {
                continue;
            }
        }
        count += 1;
        let lse_t = log_sum_exp(zt.iter().copied());
        for (p, &v) in p_teacher.iter_mut().zip(zt.iter()) {
            *p = (v - lse_t).exp();
        }
        let lse = log_sum_exp(zs.iter().copied());
        let bucket = std::iter::once(zs[0]).chain(part.new_classes().map(|k| zs[k]));
        let lse_bucket = log_sum_exp(bucket);

        total -= p_teacher[0] * (lse_bucket - lse);
        for k in 1..n_old {
            total -= p_teacher[k] * (zs[k] - lse);
        }
        Zip::from(&mut g).and(&zs).for_each(|g, &v| *g = (v - lse).exp());
        for k in 1..n_old {
            g[k] -= p_teacher[k];
        }
        for k in std::iter::once(0).chain(part.new_classes()) {
            g[k] -= p_teacher[0] * (zs[k] - lse_bucket).exp();
        }
    }
    if count == 0 {
        return Err(Error::Loss("every pixel is ignored; the mean is undefined".into()));
    }
    let n = T::from_usize(count).unwrap();
    grad.mapv_inplace(|v| v / n);
    Ok((total / n, grad))
}
