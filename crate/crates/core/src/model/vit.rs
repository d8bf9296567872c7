//! Pre-norm ViT encoder over patch tokens, no class token.

use ndarray::{s, Array2, ArrayView3, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;

use super::layers::{
    gelu, gelu_grad, normal_matrix, softmax_rows, softmax_rows_backward, LayerNorm, LayerNormCache, Linear,
};
use super::ModelConfig;
use crate::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub ln1: LayerNorm<T>,
    /// Packed `[q | k | v]` projection, `[d, 3d]`.
    pub qkv: Linear<T>,
    pub proj: Linear<T>,
    pub ln2: LayerNorm<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

#[derive(Debug, Clone)]
struct BlockCache<T> {
    x: Array2<T>,
    ln1: LayerNormCache<T>,
    a: Array2<T>,
    qkv: Array2<T>,
    attn: Vec<Array2<T>>,
    o: Array2<T>,
    ln2: LayerNormCache<T>,
    m: Array2<T>,
    u: Array2<T>,
    g: Array2<T>,
}

impl<T: Real> Block<T> {
    fn init(d: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            ln1: LayerNorm::new(d),
            qkv: Linear::init(d, 3 * d, rng),
            proj: Linear::init(d, d, rng),
            ln2: LayerNorm::new(d),
            fc1: Linear::init(d, hidden, rng),
            fc2: Linear::init(hidden, d, rng),
        }
    }

    fn zeros(d: usize, hidden: usize) -> Self {
        Self {
            ln1: LayerNorm::zeros(d),
            qkv: Linear::zeros(d, 3 * d),
            proj: Linear::zeros(d, d),
            ln2: LayerNorm::zeros(d),
            fc1: Linear::zeros(d, hidden),
            fc2: Linear::zeros(hidden, d),
        }
    }

    fn forward(&self, x: Array2<T>, n_heads: usize) -> (Array2<T>, BlockCache<T>) {
        let (n, d) = x.dim();
        let dh = d / n_heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();

        let (a, ln1) = self.ln1.forward(&x);
        let qkv = self.qkv.forward(&a.view());
        let mut o = Array2::zeros((n, d));
        let mut attn = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let q = qkv.slice(s![.., h * dh..(h + 1) * dh]);
            let k = qkv.slice(s![.., d + h * dh..d + (h + 1) * dh]);
            let v = qkv.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
            let mut scores = q.dot(&k.t()) * scale;
            softmax_rows(&mut scores);
            o.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&scores.dot(&v));
            attn.push(scores);
        }
        let mid = &x + &self.proj.forward(&o.view());
        let (m, ln2) = self.ln2.forward(&mid);
        let u = self.fc1.forward(&m.view());
        let g = u.mapv(gelu);
        let y = &mid + &self.fc2.forward(&g.view());
        let cache = BlockCache {
            x,
            ln1,
            a,
            qkv,
            attn,
            o,
            ln2,
            m,
            u,
            g,
        };
        (y, cache)
    }

    fn backward(&self, c: &BlockCache<T>, dy: &Array2<T>, n_heads: usize, grad: &mut Block<T>) -> Array2<T> {
        let (n, d) = c.x.dim();
        let dh = d / n_heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();

        let dg = self.fc2.backward(&c.g.view(), &dy.view(), &mut grad.fc2);
        let du = dg * &c.u.mapv(gelu_grad);
        let dm = self.fc1.backward(&c.m.view(), &du.view(), &mut grad.fc1);
        let dmid = dy + &self.ln2.backward(&c.ln2, &dm, &mut grad.ln2);

        let d_o = self.proj.backward(&c.o.view(), &dmid.view(), &mut grad.proj);
        let mut dqkv = Array2::zeros((n, 3 * d));
        for h in 0..n_heads {
            let (q0, k0, v0) = (h * dh, d + h * dh, 2 * d + h * dh);
            let q = c.qkv.slice(s![.., q0..q0 + dh]);
            let k = c.qkv.slice(s![.., k0..k0 + dh]);
            let v = c.qkv.slice(s![.., v0..v0 + dh]);
            let a = &c.attn[h];
            let d_oh = d_o.slice(s![.., h * dh..(h + 1) * dh]);
            let da = d_oh.dot(&v.t());
            dqkv.slice_mut(s![.., v0..v0 + dh]).assign(&a.t().dot(&d_oh));
            let ds = softmax_rows_backward(a, &da) * scale;
            dqkv.slice_mut(s![.., q0..q0 + dh]).assign(&ds.dot(&k));
            dqkv.slice_mut(s![.., k0..k0 + dh]).assign(&ds.t().dot(&q));
        }
        let da = self.qkv.backward(&c.a.view(), &dqkv.view(), &mut grad.qkv);
        dmid + self.ln1.backward(&c.ln1, &da, &mut grad.ln1)
    }

    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, T>)>) {
        push_ln(&self.ln1, &format!("{prefix}.ln1"), out);
        push_linear(&self.qkv, &format!("{prefix}.qkv"), out);
        push_linear(&self.proj, &format!("{prefix}.proj"), out);
        push_ln(&self.ln2, &format!("{prefix}.ln2"), out);
        push_linear(&self.fc1, &format!("{prefix}.fc1"), out);
        push_linear(&self.fc2, &format!("{prefix}.fc2"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, T>)>) {
        push_ln_mut(&mut self.ln1, &format!("{prefix}.ln1"), out);
        push_linear_mut(&mut self.qkv, &format!("{prefix}.qkv"), out);
        push_linear_mut(&mut self.proj, &format!("{prefix}.proj"), out);
        push_ln_mut(&mut self.ln2, &format!("{prefix}.ln2"), out);
        push_linear_mut(&mut self.fc1, &format!("{prefix}.fc1"), out);
        push_linear_mut(&mut self.fc2, &format!("{prefix}.fc2"), out);
    }
}

fn push_linear<'a, T>(l: &'a Linear<T>, name: &str, out: &mut Vec<(String, ArrayViewD<'a, T>)>) {
    out.push((format!("{name}.weight"), l.weight.view().into_dyn()));
    out.push((format!("{name}.bias"), l.bias.view().into_dyn()));
}

fn push_ln<'a, T>(l: &'a LayerNorm<T>, name: &str, out: &mut Vec<(String, ArrayViewD<'a, T>)>) {
    out.push((format!("{name}.gamma"), l.gamma.view().into_dyn()));
    out.push((format!("{name}.beta"), l.beta.view().into_dyn()));
}

fn push_linear_mut<'a, T>(l: &'a mut Linear<T>, name: &str, out: &mut Vec<(String, ArrayViewMutD<'a, T>)>) {
    out.push((format!("{name}.weight"), l.weight.view_mut().into_dyn()));
    out.push((format!("{name}.bias"), l.bias.view_mut().into_dyn()));
}

fn push_ln_mut<'a, T>(l: &'a mut LayerNorm<T>, name: &str, out: &mut Vec<(String, ArrayViewMutD<'a, T>)>) {
    out.push((format!("{name}.gamma"), l.gamma.view_mut().into_dyn()));
    out.push((format!("{name}.beta"), l.beta.view_mut().into_dyn()));
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<T> {
    pub patch_embed: Linear<T>,
    /// Learned, `[n_patches, d]`, added after the patch projection.
    pub pos_embed: Array2<T>,
    pub blocks: Vec<Block<T>>,
    /// Final normalization; its output is the last-layer patch state.
    pub norm: LayerNorm<T>,
    n_heads: usize,
}

#[derive(Debug, Clone)]
pub struct EncoderCache<T> {
    patches: Array2<T>,
    blocks: Vec<BlockCache<T>>,
    norm: LayerNormCache<T>,
}

impl<T: Real> Encoder<T> {
    pub fn init(config: &ModelConfig, rng: &mut impl Rng) -> Self {
        let d = config.embed_dim;
        let patch_dim = config.patch_size * config.patch_size * 3;
        let hidden = config.hidden_dim();
        Self {
            patch_embed: Linear::init(patch_dim, d, rng),
            pos_embed: normal_matrix(config.n_patches(), d, 0.02, rng),
            blocks: (0..config.n_layers).map(|_| Block::init(d, hidden, rng)).collect(),
            norm: LayerNorm::new(d),
            n_heads: config.n_heads,
        }
    }

    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.embed_dim;
        let hidden = config.hidden_dim();
        Self {
            patch_embed: Linear::zeros(config.patch_size * config.patch_size * 3, d),
            pos_embed: Array2::zeros((config.n_patches(), d)),
            blocks: (0..config.n_layers).map(|_| Block::zeros(d, hidden)).collect(),
            norm: LayerNorm::zeros(d),
            n_heads: config.n_heads,
        }
    }

    /// Returns one state per block; the last one is passed through the final norm.
    pub fn forward(&self, patches: Array2<T>) -> (Vec<Array2<T>>, EncoderCache<T>) {
        let n_layers = self.blocks.len();
        let mut z = self.patch_embed.forward(&patches.view()) + &self.pos_embed;
        let mut states = Vec::with_capacity(n_layers);
        let mut caches = Vec::with_capacity(n_layers);
        for block in &self.blocks {
            let (y, cache) = block.forward(z, self.n_heads);
            caches.push(cache);
            states.push(y.clone());
            z = y;
        }
        let (out, norm) = self.norm.forward(&z);
        *states.last_mut().expect("at least one block") = out;
        (
            states,
            EncoderCache {
                patches,
                blocks: caches,
                norm,
            },
        )
    }

    /// `d_states[l]` is the upstream gradient for layer `l` (0-based), if any.
    pub fn backward(&self, cache: &EncoderCache<T>, d_states: &[Option<Array2<T>>], grad: &mut Encoder<T>) {
        let n_layers = self.blocks.len();
        let (n, d) = (self.pos_embed.nrows(), self.pos_embed.ncols());
        let top = d_states[n_layers - 1].clone().unwrap_or_else(|| Array2::zeros((n, d)));
        let mut dz = self.norm.backward(&cache.norm, &top, &mut grad.norm);
        for l in (0..n_layers).rev() {
            dz = self.blocks[l].backward(&cache.blocks[l], &dz, self.n_heads, &mut grad.blocks[l]);
            if l > 0 {
                if let Some(ds) = &d_states[l - 1] {
                    dz += ds;
                }
            }
        }
        grad.pos_embed += &dz;
        ndarray::linalg::general_mat_mul(
            T::one(),
            &cache.patches.t(),
            &dz,
            T::one(),
            &mut grad.patch_embed.weight,
        );
        grad.patch_embed.bias += &dz.sum_axis(Axis(0));
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    pub fn visit<'a>(&'a self, out: &mut Vec<(String, ArrayViewD<'a, T>)>) {
        push_linear(&self.patch_embed, "patch_embed", out);
        out.push(("pos_embed".into(), self.pos_embed.view().into_dyn()));
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("blocks.{i}"), out);
        }
        push_ln(&self.norm, "norm", out);
    }

    pub fn visit_mut<'a>(&'a mut self, out: &mut Vec<(String, ArrayViewMutD<'a, T>)>) {
        push_linear_mut(&mut self.patch_embed, "patch_embed", out);
        out.push(("pos_embed".into(), self.pos_embed.view_mut().into_dyn()));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("blocks.{i}"), out);
        }
        push_ln_mut(&mut self.norm, "norm", out);
    }
}

/// `[H, W, 3]` image to `[n_patches, p*p*3]` rows in raster order, rescaled to `[-1, 1]`.
pub fn patchify<T: Real>(image: &ArrayView3<f32>, patch: usize) -> Array2<T> {
    let (h, w, _) = image.dim();
    let (gh, gw) = (h / patch, w / patch);
    let mut out = Array2::zeros((gh * gw, patch * patch * 3));
    for gy in 0..gh {
        for gx in 0..gw {
            let mut row = out.row_mut(gy * gw + gx);
            let mut k = 0;
            for py in 0..patch {
                for px in 0..patch {
                    for c in 0..3 {
                        let v = image[[gy * patch + py, gx * patch + px, c]];
                        row[k] = T::lit(f64::from(v) * 2.0 - 1.0);
                        k += 1;
                    }
                }
            }
        }
    }
    out
}
