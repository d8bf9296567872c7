//! Patch-wise contrastive losses.
//!
//! Patch `i` of the anchor sequence should match patch `i` of the reference
//! sequence and differ from every other reference patch. Similarities are
//! absolute cosines; the per-row term is `-P_ii + log Σ_j exp(P_ij)`.

use ndarray::{Array2, ArrayView2, Axis};

use super::{log_sum_exp, AbsCosine};
use crate::{Error, Real, Result};

/// Value and gradients w.r.t. `(anchor, reference)`. `temperature` divides
/// the similarities; the losses used in training keep it at 1.
pub fn patch_contrastive<T: Real>(
    anchor: &ArrayView2<T>,
    reference: &ArrayView2<T>,
    temperature: T,
) -> Result<(T, Array2<T>, Array2<T>)> {
    if anchor.dim() != reference.dim() {
        return Err(Error::Loss(format!(
            "patch sequences differ in shape: {:?} vs {:?}",
            anchor.dim(),
            reference.dim()
        )));
    }
    let n = anchor.nrows();
    if n == 0 {
        return Err(Error::Loss("contrastive loss needs at least one patch".into()));
    }
    if !(temperature > T::zero()) {
        return Err(Error::Loss("temperature must be positive".into()));
    }
    let cos = AbsCosine::new(anchor, reference)?;
    let logits = cos.matrix.mapv(|v| v / temperature);
    let inv_n = T::one() / T::from_usize(n).unwrap();
    let mut total = T::zero();
    let mut d_logits = Array2::zeros((n, n));
    for (i, (row, mut g)) in logits.axis_iter(Axis(0)).zip(d_logits.axis_iter_mut(Axis(0))).enumerate() {
        let lse = log_sum_exp(row.iter().copied());
        total += lse - row[i];
        for (gj, &v) in g.iter_mut().zip(row.iter()) {
            *gj = (v - lse).exp() * inv_n;
        }
        g[i] -= inv_n;
    }
    let d_matrix = d_logits.mapv(|v| v / temperature);
    let (da, db) = cos.backward(anchor, reference, &d_matrix);
    Ok((total * inv_n, da, db))
}

/// Student last layer against the frozen teacher's last layer.
pub fn contrastive_distillation<T: Real>(student_last: &ArrayView2<T>, teacher_last: &ArrayView2<T>) -> Result<T> {
    Ok(patch_contrastive(student_last, teacher_last, T::one())?.0)
}

/// Gradient is w.r.t. the student only; the teacher is constant.
pub fn contrastive_distillation_with_grad<T: Real>(
    student_last: &ArrayView2<T>,
    teacher_last: &ArrayView2<T>,
) -> Result<(T, Array2<T>)> {
    let (v, ds, _) = patch_contrastive(student_last, teacher_last, T::one())?;
    Ok((v, ds))
}

/// Last layer against the first layer of the same model.
pub fn contrastive_patch<T: Real>(last: &ArrayView2<T>, first: &ArrayView2<T>) -> Result<T> {
    Ok(patch_contrastive(last, first, T::one())?.0)
}

/// Gradients w.r.t. `(last, first)`; both come from the trained model.
pub fn contrastive_patch_with_grad<T: Real>(
    last: &ArrayView2<T>,
    first: &ArrayView2<T>,
) -> Result<(T, Array2<T>, Array2<T>)> {
    patch_contrastive(last, first, T::one())
}
