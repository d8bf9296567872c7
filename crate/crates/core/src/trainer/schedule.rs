use crate::{Error, Result};

/// Polynomial decay: `base_lr * (1 - iter / max_iter)^power`.
pub fn poly_lr(base_lr: f64, iter: usize, max_iter: usize, power: f64) -> Result<f64> {
    if max_iter == 0 {
        return Err(Error::Schedule("max_iter must be at least 1".into()));
    }
    if iter > max_iter {
        return Err(Error::Schedule(format!("iteration {iter} is past max_iter {max_iter}")));
    }
    Ok(base_lr * (1.0 - iter as f64 / max_iter as f64).powf(power))
}
