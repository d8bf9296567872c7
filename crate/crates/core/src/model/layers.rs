//! Dense building blocks with hand-written backward passes.
//!
//! Row-major token layout throughout: activations are `[tokens, features]`.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    /// `[in, out]`
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Real> Linear<T> {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Array2::zeros((fan_in, fan_out)),
            bias: Array1::zeros(fan_out),
        }
    }

    /// Xavier-normal weights, zero bias.
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
        Self {
            weight: normal_matrix(fan_in, fan_out, std, rng),
            bias: Array1::zeros(fan_out),
        }
    }

    pub fn forward(&self, x: &ArrayView2<T>) -> Array2<T> {
        x.dot(&self.weight) + &self.bias
    }

    /// Accumulates parameter gradients into `grad` and returns the input gradient.
    pub fn backward(&self, x: &ArrayView2<T>, dy: &ArrayView2<T>, grad: &mut Linear<T>) -> Array2<T> {
        general_mat_mul(T::one(), &x.t(), dy, T::one(), &mut grad.weight);
        grad.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight.t())
    }
}

pub fn normal_matrix<T: Real>(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Array2<T> {
    let dist = Normal::new(0.0, std).expect("positive std");
    Array2::from_shape_simple_fn((rows, cols), || T::lit(dist.sample(rng)))
}

pub const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<T> {
    pub gamma: Array1<T>,
    pub beta: Array1<T>,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache<T> {
    xhat: Array2<T>,
    inv_std: Array1<T>,
}

impl<T: Real> LayerNorm<T> {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            gamma: Array1::zeros(dim),
            beta: Array1::zeros(dim),
        }
    }

    pub fn forward(&self, x: &Array2<T>) -> (Array2<T>, LayerNormCache<T>) {
        let d = T::from_usize(x.ncols()).unwrap();
        let eps = T::lit(LN_EPS);
        let mut xhat = x.clone();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, s) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|&v| v * v).sum::<T>() / d;
            *s = T::one() / (var + eps).sqrt();
            let k = *s;
            row.mapv_inplace(|v| v * k);
        }
        let y = &xhat * &self.gamma + &self.beta;
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&self, cache: &LayerNormCache<T>, dy: &Array2<T>, grad: &mut LayerNorm<T>) -> Array2<T> {
        grad.gamma += &(dy * &cache.xhat).sum_axis(Axis(0));
        grad.beta += &dy.sum_axis(Axis(0));
        let d = T::from_usize(dy.ncols()).unwrap();
        let mut dx = dy * &self.gamma;
        for ((mut row, xh), &s) in dx.rows_mut().into_iter().zip(cache.xhat.rows()).zip(cache.inv_std.iter()) {
            let mean_g = row.sum() / d;
            let mean_gx = row.iter().zip(xh.iter()).map(|(&g, &x)| g * x).sum::<T>() / d;
            Zip::from(&mut row).and(&xh).for_each(|g, &x| *g = s * (*g - mean_g - x * mean_gx));
        }
        dx
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu<T: Real>(u: T) -> T {
    let (k, c, half) = (T::lit(GELU_K), T::lit(GELU_C), T::lit(0.5));
    half * u * (T::one() + (k * (u + c * u * u * u)).tanh())
}

pub fn gelu_grad<T: Real>(u: T) -> T {
    let (k, c, half) = (T::lit(GELU_K), T::lit(GELU_C), T::lit(0.5));
    let t = (k * (u + c * u * u * u)).tanh();
    half * (T::one() + t) + half * u * (T::one() - t * t) * k * (T::one() + T::lit(3.0) * c * u * u)
}

/// Softmax of each row, in place, max-shifted.
pub fn softmax_rows<T: Real>(x: &mut Array2<T>) {
    for mut row in x.rows_mut() {
        let m = row.fold(T::neg_infinity(), |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
}

/// Given `a = softmax(s)` row-wise and `da`, returns `ds`.
pub fn softmax_rows_backward<T: Real>(a: &Array2<T>, da: &Array2<T>) -> Array2<T> {
    let mut ds = da.clone();
    for (mut g, p) in ds.rows_mut().into_iter().zip(a.rows()) {
        let dot = g.iter().zip(p.iter()).map(|(&x, &y)| x * y).sum::<T>();
        Zip::from(&mut g).and(&p).for_each(|g, &p| *g = p * (*g - dot));
    }
    ds
}

/// 1-D linear interpolation weights `[out, in]` with half-pixel centers
/// (the `align_corners = false` convention). Edges clamp.
pub fn interp_matrix<T: Real>(n_in: usize, n_out: usize) -> Array2<T> {
    let mut m = Array2::zeros((n_out, n_in));
    let scale = n_in as f64 / n_out as f64;
    for o in 0..n_out {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        let frac = if i0 == i1 { 0.0 } else { src - i0 as f64 };
        m[[o, i0]] += T::lit(1.0 - frac);
        m[[o, i1]] += T::lit(frac);
    }
    m
}
