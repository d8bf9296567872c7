use ndarray::Zip;

use crate::model::{Model, ModelGrads};

/// SGD with heavy-ball momentum and L2 weight decay folded into the
/// gradient: `v = μ v + (g + λ w)`, `w -= lr · v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Option<ModelGrads<f32>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: None,
        }
    }

    pub fn step(&mut self, model: &mut Model<f32>, grads: &ModelGrads<f32>, lr: f64) {
        let velocity = self.velocity.get_or_insert_with(|| model.zero_grads());
        let (mu, wd, lr) = (self.momentum as f32, self.weight_decay as f32, lr as f32);
        for (((_, mut p), (_, g)), (_, mut v)) in model
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(velocity.tensors_mut())
        {
            Zip::from(&mut p).and(&g).and(&mut v).for_each(|p, &g, v| {
                *v = mu * *v + g + wd * *p;
                *p -= lr * *v;
            });
        }
    }
}

/// Rescales `grads` so its global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm(grads: &mut ModelGrads<f32>, max_norm: f64) -> f64 {
    let norm = grads.global_norm() as f64;
    if norm > max_norm {
        grads.scale((max_norm / norm) as f32);
    }
    norm
}
