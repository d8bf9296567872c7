//! Training objectives and patch similarity statistics.
//!
//! Every differentiable loss has a `*_with_grad` form returning the value and
//! the gradient with respect to the student-side inputs. Plain forms return
//! the value only.

mod contrastive;
mod patch;
mod similarity;
mod unbiased;

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::{Error, Real, Result};

pub use contrastive::{
    contrastive_distillation, contrastive_distillation_with_grad, contrastive_patch, contrastive_patch_with_grad,
    patch_contrastive,
};
pub use patch::{patch_l1, patch_l1_with_grad, patch_l2, patch_l2_with_grad};
pub use similarity::{abs_cos_matrix, s_negative, s_positive, AbsCosine, COSINE_EPS};
pub use unbiased::{
    kd_rebucketed, unbiased_cross_entropy, unbiased_cross_entropy_with_grad, unbiased_kd, unbiased_kd_with_grad,
};

/// Old/new split of the current label space. Classes are contiguous:
/// `0..n_old` are old (background first), `n_old..n_all` are new.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassPartition {
    n_old: usize,
    n_all: usize,
}

impl ClassPartition {
    pub fn new(n_old: usize, n_new: usize) -> Result<Self> {
        if n_old == 0 {
            return Err(Error::Loss("the old class set must contain background".into()));
        }
        Ok(Self {
            n_old,
            n_all: n_old + n_new,
        })
    }

    pub fn old(&self) -> Range<usize> {
        0..self.n_old
    }

    pub fn new_classes(&self) -> Range<usize> {
        self.n_old..self.n_all
    }

    pub fn n_old(&self) -> usize {
        self.n_old
    }

    pub fn n_all(&self) -> usize {
        self.n_all
    }
}

/// Weights of the total objective. `w_l1`/`w_l2` only serve the
/// feature-imitation ablations and default to zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_unce: f64,
    pub w_unkd: f64,
    pub w_cd: f64,
    pub w_ct: f64,
    #[serde(default)]
    pub w_l1: f64,
    #[serde(default)]
    pub w_l2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_unce: 1.0,
            w_unkd: 10.0,
            w_cd: 0.1,
            w_ct: 0.1,
            w_l1: 0.0,
            w_l2: 0.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.w_unce, self.w_unkd, self.w_cd, self.w_ct, self.w_l1, self.w_l2];
        if all.iter().any(|w| !(*w >= 0.0) || w.is_infinite()) {
            return Err(Error::Config(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }
}

/// Loss values for one batch; `None` means not computed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub unce: Option<f64>,
    pub unkd: Option<f64>,
    pub cd: Option<f64>,
    pub ct: Option<f64>,
    pub l1: Option<f64>,
    pub l2: Option<f64>,
}

/// Weighted objective. Step 0 takes exactly CE and the contrastive patch
/// loss; later steps require CE, KD, contrastive distillation and the
/// contrastive patch loss, plus any feature-imitation terms supplied.
pub fn total_loss(c: &LossComponents, w: &LossWeights, step: usize) -> Result<f64> {
    w.validate()?;
    let need = |v: Option<f64>, name: &str| {
        v.ok_or_else(|| Error::Config(format!("step {step} requires the {name} loss")))
    };
    let unce = need(c.unce, "unbiased cross-entropy")?;
    let ct = need(c.ct, "contrastive patch")?;
    if step == 0 {
        if c.unkd.is_some() || c.cd.is_some() || c.l1.is_some() || c.l2.is_some() {
            return Err(Error::Config(
                "step 0 has no teacher: distillation losses must not be supplied".into(),
            ));
        }
        return Ok(w.w_unce * unce + w.w_ct * ct);
    }
    let unkd = need(c.unkd, "unbiased distillation")?;
    let cd = need(c.cd, "contrastive distillation")?;
    Ok(w.w_unce * unce
        + w.w_unkd * unkd
        + w.w_cd * cd
        + w.w_ct * ct
        + w.w_l1 * c.l1.unwrap_or(0.0)
        + w.w_l2 * c.l2.unwrap_or(0.0))
}

/// `log Σ exp(x)` over an iterator, max-shifted.
pub(crate) fn log_sum_exp<T: Real>(values: impl Iterator<Item = T> + Clone) -> T {
    let m = values.clone().fold(T::neg_infinity(), T::max);
    if m == T::neg_infinity() {
        return m;
    }
    m + values.map(|v| (v - m).exp()).sum::<T>().ln()
}
