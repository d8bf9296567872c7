//! Patch-wise absolute cosine similarity and its diagonal/off-diagonal means.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};

use crate::{Error, Real, Result};

/// Floor on `‖a‖·‖b‖` so zero-norm patches give similarity 0 instead of NaN.
pub const COSINE_EPS: f64 = 1e-8;

/// `P[i, j] = |a_i · b_j| / max(‖a_i‖ ‖b_j‖, ε)` with what its backward pass needs.
#[derive(Debug, Clone)]
pub struct AbsCosine<T> {
    pub matrix: Array2<T>,
    dots: Array2<T>,
    denom: Array2<T>,
    floored: Array2<bool>,
    norms_a: Array1<T>,
    norms_b: Array1<T>,
}

impl<T: Real> AbsCosine<T> {
    pub fn new(a: &ArrayView2<T>, b: &ArrayView2<T>) -> Result<Self> {
        if a.ncols() != b.ncols() {
            return Err(Error::Loss(format!(
                "patch dims differ: {} vs {}",
                a.ncols(),
                b.ncols()
            )));
        }
        let eps = T::lit(COSINE_EPS);
        let norms_a = a.map_axis(Axis(1), |r| r.dot(&r).sqrt());
        let norms_b = b.map_axis(Axis(1), |r| r.dot(&r).sqrt());
        let dots = a.dot(&b.t());
        let raw = Array2::from_shape_fn(dots.dim(), |(i, j)| norms_a[i] * norms_b[j]);
        let floored = raw.mapv(|v| v < eps);
        let denom = raw.mapv(|v| v.max(eps));
        let matrix = Zip::from(&dots).and(&denom).map_collect(|&s, &n| s.abs() / n);
        Ok(Self {
            matrix,
            dots,
            denom,
            floored,
            norms_a,
            norms_b,
        })
    }

    /// Pulls `dL/dP` back to `(dL/da, dL/db)`.
    pub fn backward(&self, a: &ArrayView2<T>, b: &ArrayView2<T>, d_matrix: &Array2<T>) -> (Array2<T>, Array2<T>) {
        // dP/dS = sign(S)/N; dP/dN = -|S|/N², zero where N is floored.
        let d_dots = Zip::from(d_matrix)
            .and(&self.dots)
            .and(&self.denom)
            .map_collect(|&g, &s, &n| if s == T::zero() { T::zero() } else { g * s.signum() / n });
        let d_denom = Zip::from(d_matrix)
            .and(&self.dots)
            .and(&self.denom)
            .and(&self.floored)
            .map_collect(|&g, &s, &n, &f| if f { T::zero() } else { -g * s.abs() / (n * n) });

        let mut da = d_dots.dot(b);
        let mut db = d_dots.t().dot(a);
        // dN_ij/da_i = ‖b_j‖ a_i/‖a_i‖ and symmetrically for b.
        let ka = d_denom.dot(&self.norms_b);
        let kb = d_denom.t().dot(&self.norms_a);
        for (i, mut row) in da.rows_mut().into_iter().enumerate() {
            if self.norms_a[i] > T::zero() {
                row.scaled_add(ka[i] / self.norms_a[i], &a.row(i));
            }
        }
        for (j, mut row) in db.rows_mut().into_iter().enumerate() {
            if self.norms_b[j] > T::zero() {
                row.scaled_add(kb[j] / self.norms_b[j], &b.row(j));
            }
        }
        (da, db)
    }
}

pub fn abs_cos_matrix<T: Real>(a: &ArrayView2<T>, b: &ArrayView2<T>) -> Result<Array2<T>> {
    Ok(AbsCosine::new(a, b)?.matrix)
}

fn same_length<T>(a: &ArrayView2<T>, b: &ArrayView2<T>) -> Result<usize> {
    if a.dim() != b.dim() {
        return Err(Error::Loss(format!("patch sequences differ in shape: {:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(a.nrows())
}

/// Mean of the off-diagonal entries of the absolute cosine matrix.
pub fn s_negative<T: Real>(a: &ArrayView2<T>, b: &ArrayView2<T>) -> Result<T> {
    let n = same_length(a, b)?;
    if n < 2 {
        return Err(Error::Loss("negative similarity needs at least two patches".into()));
    }
    let p = abs_cos_matrix(a, b)?;
    let off = p.sum() - p.diag().sum();
    Ok(off / T::from_usize(n * (n - 1)).unwrap())
}

/// Mean of the diagonal of the absolute cosine matrix.
pub fn s_positive<T: Real>(a: &ArrayView2<T>, b: &ArrayView2<T>) -> Result<T> {
    let n = same_length(a, b)?;
    if n == 0 {
        return Err(Error::Loss("positive similarity needs at least one patch".into()));
    }
    let p = abs_cos_matrix(a, b)?;
    Ok(p.diag().sum() / T::from_usize(n).unwrap())
}
