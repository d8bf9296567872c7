//! Desk-scale ViT encoder with a linear per-patch decoder.

pub mod checkpoint;
pub mod layers;
mod vit;

use std::ops::Deref;
use std::sync::Arc;

use ndarray::{Array1, Array2, Array3, ArrayView3, ArrayViewD, ArrayViewMutD, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, LabelGrid, Real, Result};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointHeader};
use layers::{interp_matrix, normal_matrix};
pub use vit::{patchify, Block, Encoder, EncoderCache};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub mlp_ratio: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            embed_dim: 128,
            n_layers: 4,
            n_heads: 4,
            mlp_ratio: 4.0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return fail(format!(
                "image size {} must be a positive multiple of patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.n_heads == 0 || self.embed_dim == 0 || !self.embed_dim.is_multiple_of(self.n_heads) {
            return fail(format!(
                "embed dim {} must be a positive multiple of head count {}",
                self.embed_dim, self.n_heads
            ));
        }
        if self.n_layers < 2 {
            return fail(format!("need at least 2 layers (first != last), got {}", self.n_layers));
        }
        if !(self.mlp_ratio > 0.0) || self.hidden_dim() == 0 {
            return fail(format!("invalid mlp ratio {}", self.mlp_ratio));
        }
        Ok(())
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn n_patches(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn hidden_dim(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }
}

/// Patch representations of every encoder layer for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchStates<T> {
    /// `per_layer[l]` is `[n, d]`; index 0 is the first block's output and
    /// the last entry is the normalized output of the last block.
    pub per_layer: Vec<Array2<T>>,
    /// Patch grid `(rows, cols)`, `rows * cols == n`.
    pub grid: (usize, usize),
}

impl<T: Real> PatchStates<T> {
    pub fn new(per_layer: Vec<Array2<T>>, grid: (usize, usize)) -> Result<Self> {
        let first = per_layer
            .first()
            .ok_or_else(|| Error::Model("patch states need at least one layer".into()))?;
        let dim = first.dim();
        if per_layer.iter().any(|l| l.dim() != dim) || dim.0 != grid.0 * grid.1 {
            return Err(Error::Model("inconsistent patch state shapes".into()));
        }
        Ok(Self { per_layer, grid })
    }

    pub fn n_layers(&self) -> usize {
        self.per_layer.len()
    }

    pub fn n_patches(&self) -> usize {
        self.per_layer[0].nrows()
    }

    pub fn dim(&self) -> usize {
        self.per_layer[0].ncols()
    }

    /// Layer `l` in `1..=L`.
    pub fn layer(&self, l: usize) -> Option<&Array2<T>> {
        l.checked_sub(1).and_then(|i| self.per_layer.get(i))
    }

    pub fn first(&self) -> &Array2<T> {
        &self.per_layer[0]
    }

    pub fn last(&self) -> &Array2<T> {
        self.per_layer.last().expect("non-empty")
    }
}

/// Per-pixel class scores, `[H, W, C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SegLogits<T> {
    pub grid: Array3<T>,
}

impl<T: Real> SegLogits<T> {
    pub fn new(grid: Array3<T>) -> Self {
        Self { grid }
    }

    pub fn n_classes(&self) -> usize {
        self.grid.dim().2
    }

    pub fn size(&self) -> (usize, usize) {
        let (h, w, _) = self.grid.dim();
        (h, w)
    }
}

/// Linear decoder: one weight row and bias per class; row 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderHead<T> {
    /// `[C, d]`
    pub weights: Array2<T>,
    pub biases: Array1<T>,
}

impl<T: Real> DecoderHead<T> {
    pub fn new(weights: Array2<T>, biases: Array1<T>) -> Result<Self> {
        if weights.nrows() != biases.len() || weights.nrows() == 0 {
            return Err(Error::Model(format!(
                "head has {} weight rows but {} biases",
                weights.nrows(),
                biases.len()
            )));
        }
        Ok(Self { weights, biases })
    }

    pub fn zeros(n_classes: usize, dim: usize) -> Self {
        Self {
            weights: Array2::zeros((n_classes, dim)),
            biases: Array1::zeros(n_classes),
        }
    }

    pub fn n_classes(&self) -> usize {
        self.biases.len()
    }

    pub fn dim(&self) -> usize {
        self.weights.ncols()
    }

    /// `[n, C]` scores for `[n, d]` features.
    pub fn scores(&self, features: &Array2<T>) -> Array2<T> {
        features.dot(&self.weights.t()) + &self.biases
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrowVariant {
    /// New biases `β_b − log(n_new)`; background row untouched.
    PaperLiteral,
    /// New biases and the background bias become `β_b − log(n_new + 1)`, so
    /// the old background probability is split evenly across background and
    /// the new classes.
    #[default]
    ProbabilityPreserving,
}

/// Appends `n_new` classifier rows initialized from the background row.
pub fn grow_head<T: Real>(old: &DecoderHead<T>, n_new: usize, variant: GrowVariant) -> Result<DecoderHead<T>> {
    if n_new == 0 {
        return Err(Error::Model("grow_head needs at least one new class".into()));
    }
    let (c_old, d) = old.weights.dim();
    let mut weights = Array2::zeros((c_old + n_new, d));
    let mut biases = Array1::zeros(c_old + n_new);
    weights.slice_mut(ndarray::s![..c_old, ..]).assign(&old.weights);
    biases.slice_mut(ndarray::s![..c_old]).assign(&old.biases);
    let bg_row = old.weights.row(0);
    for r in c_old..c_old + n_new {
        weights.row_mut(r).assign(&bg_row);
    }
    let bg_bias = old.biases[0];
    let new_bias = match variant {
        GrowVariant::PaperLiteral => bg_bias - T::from_usize(n_new).unwrap().ln(),
        GrowVariant::ProbabilityPreserving => {
            let b = bg_bias - T::from_usize(n_new + 1).unwrap().ln();
            biases[0] = b;
            b
        }
    };
    biases.slice_mut(ndarray::s![c_old..]).fill(new_bias);
    DecoderHead::new(weights, biases)
}

/// Bilinear upsampling of a `[gh, gw, C]` score grid to `[H, W, C]`.
fn upsample<T: Real>(scores: &Array3<T>, out: (usize, usize)) -> Array3<T> {
    let (gh, gw, c) = scores.dim();
    let ry = interp_matrix::<T>(gh, out.0);
    let rx = interp_matrix::<T>(gw, out.1);
    let mut grid = Array3::zeros((out.0, out.1, c));
    for k in 0..c {
        let plane = ry.dot(&scores.index_axis(Axis(2), k)).dot(&rx.t());
        grid.index_axis_mut(Axis(2), k).assign(&plane);
    }
    grid
}

fn upsample_backward<T: Real>(d_grid: &Array3<T>, patch_grid: (usize, usize)) -> Array3<T> {
    let (h, w, c) = d_grid.dim();
    let ry = interp_matrix::<T>(patch_grid.0, h);
    let rx = interp_matrix::<T>(patch_grid.1, w);
    let mut out = Array3::zeros((patch_grid.0, patch_grid.1, c));
    for k in 0..c {
        let plane = ry.t().dot(&d_grid.index_axis(Axis(2), k)).dot(&rx);
        out.index_axis_mut(Axis(2), k).assign(&plane);
    }
    out
}

/// Scores the last-layer patches with `head` and upsamples to `out_size`.
pub fn decode<T: Real>(states: &PatchStates<T>, head: &DecoderHead<T>, out_size: (usize, usize)) -> Result<SegLogits<T>> {
    if head.dim() != states.dim() {
        return Err(Error::Model(format!(
            "head expects {}-dim features, states have {}",
            head.dim(),
            states.dim()
        )));
    }
    let scores = head.scores(states.last());
    let c = head.n_classes();
    let scores = scores
        .into_shape_with_order((states.grid.0, states.grid.1, c))
        .expect("n == rows * cols");
    Ok(SegLogits::new(upsample(&scores, out_size)))
}

/// Per-pixel argmax; ties go to the lowest class index.
pub fn segment<T: Real>(logits: &SegLogits<T>) -> LabelGrid {
    let (h, w) = logits.size();
    LabelGrid::from_shape_fn((h, w), |(y, x)| {
        let lane = logits.grid.slice(ndarray::s![y, x, ..]);
        let mut best = 0;
        for (k, &v) in lane.iter().enumerate() {
            if v > lane[best] {
                best = k;
            }
        }
        best as u8
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    config: ModelConfig,
    pub encoder: Encoder<T>,
    pub head: DecoderHead<T>,
}

/// Gradients with the same layout as [`Model`] parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads<T> {
    pub encoder: Encoder<T>,
    pub head: DecoderHead<T>,
}

/// Result of a training forward pass; keeps what backward needs.
#[derive(Debug, Clone)]
pub struct Forward<T> {
    pub states: PatchStates<T>,
    pub logits: SegLogits<T>,
    cache: EncoderCache<T>,
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig, n_classes: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if n_classes == 0 {
            return Err(Error::Model("model needs at least the background class".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::init(&config, &mut rng);
        let d = config.embed_dim;
        let std = (2.0 / (d + n_classes) as f64).sqrt();
        let head = DecoderHead::new(normal_matrix(n_classes, d, std, &mut rng), Array1::zeros(n_classes))?;
        Ok(Self { config, encoder, head })
    }

    /// All-zero parameters with the right shapes; used when loading.
    pub fn zeros(config: ModelConfig, n_classes: usize) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            encoder: Encoder::zeros(&config),
            head: DecoderHead::zeros(n_classes, config.embed_dim),
            config,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn n_classes(&self) -> usize {
        self.head.n_classes()
    }

    fn check_image(&self, image: &ArrayView3<f32>) -> Result<()> {
        let s = self.config.image_size;
        if image.dim() != (s, s, 3) {
            return Err(Error::Model(format!(
                "expected a {s}x{s}x3 image, got {:?}",
                image.dim()
            )));
        }
        Ok(())
    }

    pub fn encode(&self, image: &ArrayView3<f32>) -> Result<PatchStates<T>> {
        Ok(self.forward(image)?.states)
    }

    pub fn forward(&self, image: &ArrayView3<f32>) -> Result<Forward<T>> {
        self.check_image(image)?;
        let patches = patchify::<T>(image, self.config.patch_size);
        self.forward_patches(patches)
    }

    /// Forward from already-flattened patches (`[n, p*p*3]`).
    pub fn forward_patches(&self, patches: Array2<T>) -> Result<Forward<T>> {
        let g = self.config.grid_side();
        if patches.dim() != (g * g, self.encoder.patch_embed.weight.nrows()) {
            return Err(Error::Model(format!("unexpected patch matrix shape {:?}", patches.dim())));
        }
        let (per_layer, cache) = self.encoder.forward(patches);
        let states = PatchStates { per_layer, grid: (g, g) };
        let s = self.config.image_size;
        let logits = decode(&states, &self.head, (s, s))?;
        Ok(Forward { states, logits, cache })
    }

    pub fn logits(&self, image: &ArrayView3<f32>) -> Result<SegLogits<T>> {
        Ok(self.forward(image)?.logits)
    }

    pub fn predict(&self, image: &ArrayView3<f32>) -> Result<LabelGrid> {
        Ok(segment(&self.logits(image)?))
    }

    /// Backpropagates upstream gradients on the logits and on any layer's
    /// patch states (0-based `d_states`, length L or empty).
    pub fn backward(
        &self,
        fwd: &Forward<T>,
        d_logits: Option<&Array3<T>>,
        d_states: &[Option<Array2<T>>],
    ) -> Result<ModelGrads<T>> {
        let n_layers = self.config.n_layers;
        if !d_states.is_empty() && d_states.len() != n_layers {
            return Err(Error::Model(format!(
                "expected {n_layers} state gradients, got {}",
                d_states.len()
            )));
        }
        let mut d_states: Vec<Option<Array2<T>>> = if d_states.is_empty() {
            vec![None; n_layers]
        } else {
            d_states.to_vec()
        };
        let mut grads = self.zero_grads();
        if let Some(dl) = d_logits {
            if dl.dim() != fwd.logits.grid.dim() {
                return Err(Error::Model("logit gradient shape mismatch".into()));
            }
            let (gh, gw) = fwd.states.grid;
            let c = self.n_classes();
            let d_scores = upsample_backward(dl, (gh, gw))
                .into_shape_with_order((gh * gw, c))
                .expect("contiguous");
            let last = fwd.states.last();
            grads.head.weights = d_scores.t().dot(last);
            grads.head.biases = d_scores.sum_axis(Axis(0));
            let d_last = d_scores.dot(&self.head.weights);
            let slot = &mut d_states[n_layers - 1];
            *slot = Some(match slot.take() {
                Some(prev) => prev + d_last,
                None => d_last,
            });
        }
        self.encoder.backward(&fwd.cache, &d_states, &mut grads.encoder);
        Ok(grads)
    }

    pub fn zero_grads(&self) -> ModelGrads<T> {
        ModelGrads {
            encoder: Encoder::zeros(&self.config),
            head: DecoderHead::zeros(self.n_classes(), self.config.embed_dim),
        }
    }

    pub fn grow_head(&mut self, n_new: usize, variant: GrowVariant) -> Result<()> {
        self.head = grow_head(&self.head, n_new, variant)?;
        Ok(())
    }

    pub fn snapshot(&self) -> FrozenModel<T> {
        FrozenModel(Arc::new(self.clone()))
    }

    /// Parameters in a fixed order with stable names.
    pub fn tensors(&self) -> Vec<(String, ArrayViewD<'_, T>)> {
        let mut out = Vec::new();
        self.encoder.visit(&mut out);
        out.push(("head.weight".into(), self.head.weights.view().into_dyn()));
        out.push(("head.bias".into(), self.head.biases.view().into_dyn()));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, T>)> {
        let mut out = Vec::new();
        self.encoder.visit_mut(&mut out);
        out.push(("head.weight".into(), self.head.weights.view_mut().into_dyn()));
        out.push(("head.bias".into(), self.head.biases.view_mut().into_dyn()));
        out
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Same parameters in another float type.
    pub fn cast<U: Real>(&self) -> Model<U> {
        let mut out = Model::<U>::zeros(self.config.clone(), self.n_classes()).expect("validated config");
        for ((_, src), (_, mut dst)) in self.tensors().into_iter().zip(out.tensors_mut()) {
            dst.zip_mut_with(&src, |d, &s| *d = U::lit(s.as_f64()));
        }
        out
    }
}

impl<T: Real> ModelGrads<T> {
    pub fn tensors(&self) -> Vec<(String, ArrayViewD<'_, T>)> {
        let mut out = Vec::new();
        self.encoder.visit(&mut out);
        out.push(("head.weight".into(), self.head.weights.view().into_dyn()));
        out.push(("head.bias".into(), self.head.biases.view().into_dyn()));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, T>)> {
        let mut out = Vec::new();
        self.encoder.visit_mut(&mut out);
        out.push(("head.weight".into(), self.head.weights.view_mut().into_dyn()));
        out.push(("head.bias".into(), self.head.biases.view_mut().into_dyn()));
        out
    }

    pub fn add_assign(&mut self, other: &ModelGrads<T>) {
        for ((_, mut a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a += &b;
        }
    }

    pub fn scale(&mut self, k: T) {
        for (_, mut t) in self.tensors_mut() {
            t.mapv_inplace(|v| v * k);
        }
    }

    pub fn global_norm(&self) -> T {
        self.tensors()
            .iter()
            .map(|(_, t)| t.iter().map(|&v| v * v).sum::<T>())
            .sum::<T>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }
}

/// Read-only teacher; parameters cannot be reached mutably.
#[derive(Debug, Clone)]
pub struct FrozenModel<T>(Arc<Model<T>>);

impl<T> Deref for FrozenModel<T> {
    type Target = Model<T>;

    fn deref(&self) -> &Model<T> {
        &self.0
    }
}

impl<T: Real> FrozenModel<T> {
    /// A trainable copy of the frozen parameters.
    pub fn thaw(&self) -> Model<T> {
        (*self.0).clone()
    }
}
