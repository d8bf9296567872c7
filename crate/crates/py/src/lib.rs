//! Python bindings: task sequences, losses on numpy arrays, confusion
//! matrices, models and similarity profiles.

use std::path::PathBuf;

use ndarray::{Array2, Array3};
use numpy::{IntoPyArray, PyArray1, PyArray2, PyArray3, PyReadonlyArray2, PyReadonlyArray3};
use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use tiss_kit::diagnostics;
use tiss_kit::losses::{self, ClassPartition};
use tiss_kit::metrics;
use tiss_kit::model::{self, GrowVariant, ModelConfig, PatchStates, SegLogits};
use tiss_kit::protocol::{self, Mode, StepDataset};
use tiss_kit::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for tiss_kit::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn partition(n_old: usize, n_all: usize) -> PyResult<ClassPartition> {
    if n_old == 0 || n_old > n_all {
        return Err(PyValueError::new_err(format!("n_old must lie in 1..={n_all}, got {n_old}")));
    }
    ClassPartition::new(n_old, n_all - n_old).py()
}

fn parse_mode(mode: &str) -> PyResult<Mode> {
    mode.parse().py()
}

#[pyclass(name = "TaskSequence", module = "tisspy")]
struct PyTaskSequence {
    inner: protocol::TaskSequence,
}

#[pymethods]
impl PyTaskSequence {
    #[new]
    #[pyo3(signature = (class_names, step_sizes, mode = "overlapped"))]
    fn new(class_names: Vec<String>, step_sizes: Vec<usize>, mode: &str) -> PyResult<Self> {
        let inner = protocol::build_task_sequence(class_names, step_sizes, parse_mode(mode)?).py()?;
        Ok(Self { inner })
    }

    /// Builds a sequence from an `A-B` schedule string.
    #[staticmethod]
    #[pyo3(signature = (class_names, schedule, mode = "overlapped"))]
    fn from_schedule(class_names: Vec<String>, schedule: &str, mode: &str) -> PyResult<Self> {
        let sizes = protocol::parse_schedule(schedule, class_names.len()).py()?;
        Self::new(class_names, sizes, mode)
    }

    #[getter]
    fn n_steps(&self) -> usize {
        self.inner.n_steps()
    }

    #[getter]
    fn step_sizes(&self) -> Vec<usize> {
        self.inner.step_sizes.clone()
    }

    #[getter]
    fn mode(&self) -> String {
        self.inner.mode.to_string()
    }

    #[getter]
    fn class_names(&self) -> Vec<String> {
        self.inner.label_space.class_names().to_vec()
    }

    fn new_classes(&self, step: usize) -> PyResult<Vec<usize>> {
        self.check(step)?;
        Ok(self.inner.new_classes(step).map(usize::from).collect())
    }

    fn n_seen(&self, step: usize) -> PyResult<usize> {
        self.check(step)?;
        Ok(self.inner.n_seen(step))
    }

    fn is_sequential(&self) -> bool {
        self.inner.is_sequential()
    }

    /// Mask as seen during training at `step`: only that step's classes kept.
    fn remap_mask<'py>(
        &self,
        py: Python<'py>,
        mask: PyReadonlyArray2<'py, u8>,
        step: usize,
    ) -> PyResult<Bound<'py, PyArray2<u8>>> {
        self.check(step)?;
        let ds = StepDataset::new(step, Vec::new(), &self.inner);
        Ok(protocol::remap_mask(&mask.as_array().to_owned(), &ds, &self.inner).py()?.into_pyarray(py))
    }

    /// Mask for evaluation after `step`: every class seen so far kept.
    fn remap_mask_seen<'py>(
        &self,
        py: Python<'py>,
        mask: PyReadonlyArray2<'py, u8>,
        step: usize,
    ) -> PyResult<Bound<'py, PyArray2<u8>>> {
        self.check(step)?;
        Ok(protocol::remap_mask_seen(&mask.as_array().to_owned(), &self.inner, step).py()?.into_pyarray(py))
    }

    fn __repr__(&self) -> String {
        format!(
            "TaskSequence(step_sizes={:?}, mode='{}')",
            self.inner.step_sizes, self.inner.mode
        )
    }
}

impl PyTaskSequence {
    fn check(&self, step: usize) -> PyResult<()> {
        if step >= self.inner.n_steps() {
            return Err(PyValueError::new_err(format!(
                "step {step} outside 0..{}",
                self.inner.n_steps()
            )));
        }
        Ok(())
    }
}

#[pyfunction]
fn parse_schedule(schedule: &str, n_classes: usize) -> PyResult<Vec<usize>> {
    protocol::parse_schedule(schedule, n_classes).py()
}

/// `(images, masks)` of a seeded synthetic corpus; images are `[H, W, 3]` in `[0, 1]`.
#[pyfunction]
#[pyo3(signature = (n_images, image_size = 32, n_classes = 4, seed = 0))]
fn toy_samples<'py>(
    py: Python<'py>,
    n_images: usize,
    image_size: usize,
    n_classes: usize,
    seed: u64,
) -> PyResult<(Vec<Bound<'py, PyArray3<f32>>>, Vec<Bound<'py, PyArray2<u8>>>)> {
    let spec = protocol::ToySpec {
        n_images,
        image_size,
        n_classes,
        seed,
    };
    let samples = protocol::toy_samples(&spec).py()?;
    Ok(samples.into_iter().map(|(i, m)| (i.into_pyarray(py), m.into_pyarray(py))).unzip())
}

fn seg_logits(a: PyReadonlyArray3<'_, f64>) -> SegLogits<f64> {
    SegLogits::new(a.as_array().to_owned())
}

/// Unbiased cross entropy of `[H, W, C]` logits; the first `n_old`
/// channels are the old classes.
#[pyfunction]
fn unbiased_cross_entropy(logits: PyReadonlyArray3<'_, f64>, target: PyReadonlyArray2<'_, u8>, n_old: usize) -> PyResult<f64> {
    let z = seg_logits(logits);
    let part = partition(n_old, z.n_classes())?;
    losses::unbiased_cross_entropy(&z, &target.as_array().to_owned(), &part).py()
}

#[pyfunction]
#[pyo3(signature = (student, teacher, target = None))]
fn unbiased_kd(
    student: PyReadonlyArray3<'_, f64>,
    teacher: PyReadonlyArray3<'_, f64>,
    target: Option<PyReadonlyArray2<'_, u8>>,
) -> PyResult<f64> {
    let (s, t) = (seg_logits(student), seg_logits(teacher));
    let part = partition(t.n_classes(), s.n_classes())?;
    let target = target.map(|t| t.as_array().to_owned());
    losses::unbiased_kd(&s, &t, &part, target.as_ref()).py()
}

#[pyfunction]
fn abs_cos_matrix<'py>(
    py: Python<'py>,
    a: PyReadonlyArray2<'py, f64>,
    b: PyReadonlyArray2<'py, f64>,
) -> PyResult<Bound<'py, PyArray2<f64>>> {
    Ok(losses::abs_cos_matrix(&a.as_array(), &b.as_array()).py()?.into_pyarray(py))
}

#[pyfunction]
fn s_positive(a: PyReadonlyArray2<'_, f64>, b: PyReadonlyArray2<'_, f64>) -> PyResult<f64> {
    losses::s_positive(&a.as_array(), &b.as_array()).py()
}

#[pyfunction]
fn s_negative(a: PyReadonlyArray2<'_, f64>, b: PyReadonlyArray2<'_, f64>) -> PyResult<f64> {
    losses::s_negative(&a.as_array(), &b.as_array()).py()
}

#[pyfunction]
fn contrastive_distillation(student_last: PyReadonlyArray2<'_, f64>, teacher_last: PyReadonlyArray2<'_, f64>) -> PyResult<f64> {
    losses::contrastive_distillation(&student_last.as_array(), &teacher_last.as_array()).py()
}

#[pyfunction]
fn contrastive_patch(last: PyReadonlyArray2<'_, f64>, first: PyReadonlyArray2<'_, f64>) -> PyResult<f64> {
    losses::contrastive_patch(&last.as_array(), &first.as_array()).py()
}

fn states(layers: Vec<PyReadonlyArray2<'_, f64>>) -> PyResult<PatchStates<f64>> {
    let layers: Vec<Array2<f64>> = layers.iter().map(|a| a.as_array().to_owned()).collect();
    let n = layers.first().map_or(0, |l| l.nrows());
    PatchStates::new(layers, (1, n)).py()
}

/// Patch L1 distance between two lists of `[n, d]` layer states.
#[pyfunction]
fn patch_l1(student: Vec<PyReadonlyArray2<'_, f64>>, teacher: Vec<PyReadonlyArray2<'_, f64>>) -> PyResult<f64> {
    losses::patch_l1(&states(student)?, &states(teacher)?).py()
}

#[pyfunction]
fn patch_l2(student: Vec<PyReadonlyArray2<'_, f64>>, teacher: Vec<PyReadonlyArray2<'_, f64>>) -> PyResult<f64> {
    losses::patch_l2(&states(student)?, &states(teacher)?).py()
}

#[pyclass(name = "ConfusionMatrix", module = "tisspy")]
struct PyConfusionMatrix {
    inner: metrics::ConfusionMatrix,
}

#[pymethods]
impl PyConfusionMatrix {
    #[new]
    fn new(n_classes: usize) -> Self {
        Self {
            inner: metrics::ConfusionMatrix::new(n_classes),
        }
    }

    fn accumulate(&mut self, pred: PyReadonlyArray2<'_, u8>, target: PyReadonlyArray2<'_, u8>) -> PyResult<()> {
        self.inner
            .accumulate(&pred.as_array().to_owned(), &target.as_array().to_owned())
            .py()
    }

    fn iou(&self, class_id: usize) -> PyResult<Option<f64>> {
        if class_id >= self.inner.n_classes() {
            return Err(PyValueError::new_err(format!("class {class_id} out of range")));
        }
        Ok(self.inner.iou(class_id))
    }

    fn miou(&self, classes: Vec<usize>) -> PyResult<f64> {
        self.inner.miou(&classes).py()
    }

    #[getter]
    fn counts<'py>(&self, py: Python<'py>) -> Bound<'py, PyArray2<u64>> {
        self.inner.counts().clone().into_pyarray(py)
    }

    #[getter]
    fn total(&self) -> u64 {
        self.inner.total()
    }
}

#[pyclass(name = "Model", module = "tisspy")]
struct PyModel {
    inner: model::Model<f32>,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (n_classes, seed = 0, image_size = 64, patch_size = 8, embed_dim = 128, n_layers = 4, n_heads = 4, mlp_ratio = 4.0))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        n_classes: usize,
        seed: u64,
        image_size: usize,
        patch_size: usize,
        embed_dim: usize,
        n_layers: usize,
        n_heads: usize,
        mlp_ratio: f64,
    ) -> PyResult<Self> {
        let config = ModelConfig {
            image_size,
            patch_size,
            embed_dim,
            n_layers,
            n_heads,
            mlp_ratio,
            seed,
        };
        Ok(Self {
            inner: model::Model::new(config, n_classes, seed).py()?,
        })
    }

    /// Loads the model stored in a checkpoint file.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: model::load_checkpoint(&path, None).py()?.model,
        })
    }

    #[getter]
    fn n_classes(&self) -> usize {
        self.inner.n_classes()
    }

    #[getter]
    fn n_params(&self) -> usize {
        self.inner.n_params()
    }

    #[getter]
    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let c = self.inner.config();
        let d = PyDict::new(py);
        d.set_item("image_size", c.image_size)?;
        d.set_item("patch_size", c.patch_size)?;
        d.set_item("embed_dim", c.embed_dim)?;
        d.set_item("n_layers", c.n_layers)?;
        d.set_item("n_heads", c.n_heads)?;
        d.set_item("mlp_ratio", c.mlp_ratio)?;
        d.set_item("seed", c.seed)?;
        Ok(d)
    }

    /// `[H, W, C]` class scores for a `[H, W, 3]` image.
    fn logits<'py>(&self, py: Python<'py>, image: PyReadonlyArray3<'py, f32>) -> PyResult<Bound<'py, PyArray3<f32>>> {
        Ok(self.inner.logits(&image.as_array()).py()?.grid.into_pyarray(py))
    }

    fn predict<'py>(&self, py: Python<'py>, image: PyReadonlyArray3<'py, f32>) -> PyResult<Bound<'py, PyArray2<u8>>> {
        Ok(self.inner.predict(&image.as_array()).py()?.into_pyarray(py))
    }

    /// Per-layer `[n_patches, d]` states, first block to final norm.
    fn encode<'py>(&self, py: Python<'py>, image: PyReadonlyArray3<'py, f32>) -> PyResult<Vec<Bound<'py, PyArray2<f32>>>> {
        let s = self.inner.encode(&image.as_array()).py()?;
        Ok((1..=s.n_layers()).map(|l| s.layer(l).unwrap().clone().into_pyarray(py)).collect())
    }

    #[pyo3(signature = (n_new, variant = "probability_preserving"))]
    fn grow_head(&mut self, n_new: usize, variant: &str) -> PyResult<()> {
        let variant = match variant {
            "probability_preserving" => GrowVariant::ProbabilityPreserving,
            "paper_literal" => GrowVariant::PaperLiteral,
            other => return Err(PyValueError::new_err(format!("unknown grow variant '{other}'"))),
        };
        self.inner.grow_head(n_new, variant).py()
    }

    #[getter]
    fn head<'py>(&self, py: Python<'py>) -> (Bound<'py, PyArray2<f32>>, Bound<'py, PyArray1<f32>>) {
        let h = &self.inner.head;
        (h.weights.clone().into_pyarray(py), h.biases.clone().into_pyarray(py))
    }
}

/// One dict per step `t >= 1` with the four similarity statistics.
#[pyfunction]
#[pyo3(signature = (models, images, sample_size = diagnostics::DEFAULT_SAMPLE_SIZE, seed = 0))]
fn similarity_profile<'py>(
    py: Python<'py>,
    models: Vec<PyRef<'py, PyModel>>,
    images: Vec<PyReadonlyArray3<'py, f32>>,
    sample_size: usize,
    seed: u64,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let models: Vec<_> = models.iter().map(|m| m.inner.clone()).collect();
    let images: Vec<Array3<f32>> = images.iter().map(|i| i.as_array().to_owned()).collect();
    let profile = diagnostics::similarity_profile(&models, &images, sample_size, seed).py()?;
    profile
        .per_step
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("step", r.step)?;
            d.set_item("s_pos_teacher", r.s_pos_teacher)?;
            d.set_item("s_neg_teacher", r.s_neg_teacher)?;
            d.set_item("s_pos_depth", r.s_pos_depth)?;
            d.set_item("s_neg_depth", r.s_neg_depth)?;
            d.set_item("n_images", r.n_images)?;
            Ok(d)
        })
        .collect()
}

#[pymodule]
fn tisspy(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("BACKGROUND", protocol::BACKGROUND)?;
    m.add("IGNORE", protocol::IGNORE)?;
    m.add_class::<PyTaskSequence>()?;
    m.add_class::<PyConfusionMatrix>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(parse_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(toy_samples, m)?)?;
    m.add_function(wrap_pyfunction!(unbiased_cross_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(unbiased_kd, m)?)?;
    m.add_function(wrap_pyfunction!(abs_cos_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(s_positive, m)?)?;
    m.add_function(wrap_pyfunction!(s_negative, m)?)?;
    m.add_function(wrap_pyfunction!(contrastive_distillation, m)?)?;
    m.add_function(wrap_pyfunction!(contrastive_patch, m)?)?;
    m.add_function(wrap_pyfunction!(patch_l1, m)?)?;
    m.add_function(wrap_pyfunction!(patch_l2, m)?)?;
    m.add_function(wrap_pyfunction!(similarity_profile, m)?)?;
    Ok(())
}
