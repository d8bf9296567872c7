//! Feature-imitation distillation between student and teacher patch states.

use ndarray::Array2;

use crate::model::PatchStates;
use crate::{Error, Real, Result};

fn check<T: Real>(a: &PatchStates<T>, b: &PatchStates<T>) -> Result<()> {
    if a.n_layers() != b.n_layers() || a.per_layer[0].dim() != b.per_layer[0].dim() {
        return Err(Error::Loss(format!(
            "patch state shapes differ: {} x {:?} vs {} x {:?}",
            a.n_layers(),
            a.per_layer[0].dim(),
            b.n_layers(),
            b.per_layer[0].dim()
        )));
    }
    Ok(())
}

/// Layer-averaged, patch- and coordinate-summed penalty `f(student - teacher)`.
fn imitation<T: Real>(
    student: &PatchStates<T>,
    teacher: &PatchStates<T>,
    value: impl Fn(T) -> T,
    slope: impl Fn(T) -> T,
) -> Result<(T, Vec<Array2<T>>)> {
    check(student, teacher)?;
    let inv_layers = T::one() / T::from_usize(student.n_layers()).unwrap();
    let mut total = T::zero();
    let mut grads = Vec::with_capacity(student.n_layers());
    for (s, t) in student.per_layer.iter().zip(&teacher.per_layer) {
        let diff = s - t;
        total += diff.iter().map(|&d| value(d)).sum::<T>();
        grads.push(diff.mapv(|d| slope(d) * inv_layers));
    }
    Ok((total * inv_layers, grads))
}

pub fn patch_l1<T: Real>(student: &PatchStates<T>, teacher: &PatchStates<T>) -> Result<T> {
    Ok(patch_l1_with_grad(student, teacher)?.0)
}

/// Gradient uses `sign(0) = 0`.
pub fn patch_l1_with_grad<T: Real>(student: &PatchStates<T>, teacher: &PatchStates<T>) -> Result<(T, Vec<Array2<T>>)> {
    imitation(student, teacher, |d| d.abs(), |d| if d == T::zero() { d } else { d.signum() })
}

pub fn patch_l2<T: Real>(student: &PatchStates<T>, teacher: &PatchStates<T>) -> Result<T> {
    Ok(patch_l2_with_grad(student, teacher)?.0)
}

pub fn patch_l2_with_grad<T: Real>(student: &PatchStates<T>, teacher: &PatchStates<T>) -> Result<(T, Vec<Array2<T>>)> {
    imitation(student, teacher, |d| d * d, |d| d + d)
}
