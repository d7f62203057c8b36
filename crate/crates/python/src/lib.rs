//! Python bindings: `import dscore`.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;

use ::dscore as core;
use core::data::{load_split, save_idx_dataset, Split};
use core::{ErrorClass, GlyphPlacement, ScoreInputs, SyntheticConfig, TransformSpec};

fn py_err(e: core::Error) -> PyErr {
    match (&e, e.class()) {
        (core::Error::Io(_), _) => PyIOError::new_err(e.to_string()),
        (_, ErrorClass::Numeric) => PyArithmeticError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn parse_split(name: &str) -> PyResult<Split> {
    match name {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        other => Err(PyValueError::new_err(format!("unknown split `{other}`"))),
    }
}

fn inputs(n: usize, classes: usize, original_accuracy: f64, raw_attention: Vec<f64>, feature: Vec<f64>, attention: Vec<f64>) -> ScoreInputs {
    ScoreInputs { n, classes, original_accuracy, raw_attention, feature, attention }
}

/// Upper bound on the robustness index for grid order `n` and `classes` classes.
#[pyfunction]
fn g_bound(n: usize, classes: usize) -> f64 {
    core::g_bound(n, classes)
}

#[pyfunction]
#[pyo3(signature = (n, original_accuracy, raw_attention, feature, attention, classes = 10))]
fn fitness(n: usize, original_accuracy: f64, raw_attention: Vec<f64>, feature: Vec<f64>, attention: Vec<f64>, classes: usize) -> PyResult<f64> {
    core::fitness(&inputs(n, classes, original_accuracy, raw_attention, feature, attention)).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (n, original_accuracy, raw_attention, feature, attention, classes = 10))]
fn robustness(n: usize, original_accuracy: f64, raw_attention: Vec<f64>, feature: Vec<f64>, attention: Vec<f64>, classes: usize) -> PyResult<f64> {
    core::robustness(&inputs(n, classes, original_accuracy, raw_attention, feature, attention)).map_err(py_err)
}

#[pyfunction]
fn d_score(v_fitness: f64, v_robust: f64) -> f64 {
    core::d_score(v_fitness, v_robust)
}

/// `(top, bottom, left, right)` pads pushing an image toward cell `(row, col)`, 1-based.
#[pyfunction]
fn pad_amounts(height: usize, width: usize, n: usize, t: f64, row: usize, col: usize) -> PyResult<(usize, usize, usize, usize)> {
    let spec = TransformSpec::new(n, t, row, col).map_err(py_err)?;
    let p = core::pad_amounts(height, width, &spec);
    Ok((p.top, p.bottom, p.left, p.right))
}

/// Region bounds `(row_start, row_end, col_start, col_end)` in row-major order.
#[pyfunction]
fn partition(height: usize, width: usize, n: usize) -> PyResult<Vec<(usize, usize, usize, usize)>> {
    let grid = core::partition(height, width, n).map_err(py_err)?;
    (1..=grid.region_count())
        .map(|i| {
            let (r, c) = grid.bounds(i).map_err(py_err)?;
            Ok((r.start, r.end, c.start, c.end))
        })
        .collect()
}

/// `(p, padded_height, padded_width)` for score-guided augmentation.
#[pyfunction]
fn make_plan(v_robust: f64, n: usize, classes: usize, height: usize, width: usize) -> PyResult<(f64, usize, usize)> {
    let plan = core::make_plan(v_robust, n, classes, height, width).map_err(py_err)?;
    Ok((plan.p, plan.padded_height, plan.padded_width))
}

#[pyclass(name = "Dataset", module = "dscore")]
struct PyDataset {
    inner: core::Dataset,
}

#[pymethods]
impl PyDataset {
    /// Loads one split (`"train"` or `"test"`) from an IDX directory.
    #[staticmethod]
    #[pyo3(signature = (dir, split = "test"))]
    fn load(dir: PathBuf, split: &str) -> PyResult<Self> {
        Ok(Self { inner: load_split(&dir, parse_split(split)?).map_err(py_err)? })
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        save_idx_dataset(&dir, &self.inner).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// `(channels, height, width)`.
    #[getter]
    fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.inner.image_shape();
        (s.channels, s.height, s.width)
    }

    #[getter]
    fn labels(&self) -> Vec<usize> {
        self.inner.labels().to_vec()
    }

    /// Flat pixel values of image `index`.
    fn image(&self, index: usize) -> PyResult<Vec<f32>> {
        if index >= self.inner.len() {
            return Err(PyValueError::new_err(format!("index {index} out of range")));
        }
        Ok(self.inner.image(index).to_vec())
    }

    #[getter]
    fn dataset_id(&self) -> String {
        self.inner.dataset_id()
    }
}

/// Synthetic glyph data: returns `(train, test)`.
#[pyfunction]
#[pyo3(signature = (kind = "centered", seed = 0, classes = 10, n_train = 2000, n_test = 500, size = 24))]
fn gen_synthetic(kind: &str, seed: u64, classes: usize, n_train: usize, n_test: usize, size: usize) -> PyResult<(PyDataset, PyDataset)> {
    let kind: GlyphPlacement = kind.parse().map_err(py_err)?;
    let cfg = SyntheticConfig { kind, classes, n_train, n_test, size, seed };
    let data = core::gen_synthetic(&cfg).map_err(py_err)?;
    Ok((PyDataset { inner: data.train }, PyDataset { inner: data.test }))
}

#[pyclass(name = "Model", module = "dscore")]
struct PyModel {
    inner: core::Model,
}

#[pymethods]
impl PyModel {
    /// Builds a fresh model from a preset name or a layer list.
    #[staticmethod]
    #[pyo3(signature = (arch, seed = 0, input_shape = None, classes = None))]
    fn build(arch: &str, seed: u64, input_shape: Option<(usize, usize, usize)>, classes: Option<usize>) -> PyResult<Self> {
        let input = input_shape.map(|(c, h, w)| core::ImageShape::new(c, h, w));
        let mut cfg = core::ModelConfig::from_arch(arch, input).map_err(py_err)?;
        if let Some(k) = classes {
            cfg = cfg.with_classes(k).map_err(py_err)?;
        }
        Ok(Self { inner: core::Model::build(&cfg, seed).map_err(py_err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: core::load_weights(&path).map_err(py_err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        core::save_weights(&self.inner, &path).map_err(py_err)
    }

    #[getter]
    fn layers(&self) -> String {
        self.inner.config().layer_string()
    }

    #[getter]
    fn model_id(&self) -> PyResult<String> {
        core::nn::model_id(&self.inner).map_err(py_err)
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.inner.parameter_count()
    }

    /// Mini-batch SGD; returns the mean training loss of each epoch.
    #[pyo3(signature = (data, epochs = 6, lr = 0.05, batch_size = 16, seed = 0))]
    fn train(&mut self, py: Python<'_>, data: &PyDataset, epochs: usize, lr: f32, batch_size: usize, seed: u64) -> PyResult<Vec<f64>> {
        let cfg = core::TrainConfig { epochs, lr, batch_size, seed };
        let model = &mut self.inner;
        let stats = py.detach(|| core::train(model, &data.inner, &cfg, None)).map_err(py_err)?;
        Ok(stats.iter().map(|e| e.loss).collect())
    }

    fn evaluate(&self, py: Python<'_>, data: &PyDataset) -> PyResult<f64> {
        py.detach(|| core::evaluate(&self.inner, &data.inner, None)).map_err(py_err)
    }

    /// Predicted classes for flat images laid out back to back.
    fn predict(&self, images: Vec<f32>) -> PyResult<Vec<usize>> {
        let s = self.inner.input_shape();
        if images.is_empty() || !images.len().is_multiple_of(s.len()) {
            return Err(PyValueError::new_err(format!("pixel count must be a multiple of {}", s.len())));
        }
        let batch = images.len() / s.len();
        let x = core::Tensor::new(s.with_batch(batch).dims().to_vec(), images).map_err(py_err)?;
        self.inner.predict(&x, None).map_err(py_err)
    }
}

#[pyclass(name = "Report", module = "dscore", get_all)]
struct PyReport {
    n: usize,
    t: f64,
    classes: usize,
    original_accuracy: f64,
    feature: Vec<f64>,
    attention: Vec<f64>,
    attention_raw: Vec<f64>,
    feature_raw: Vec<f64>,
    v_fitness: f64,
    v_robust: f64,
    g_n: f64,
    d_score: f64,
    p: f64,
    feature_fallback: bool,
    toml: String,
}

#[pymethods]
impl PyReport {
    fn __repr__(&self) -> String {
        format!("Report(n={}, v_fitness={:.4}, v_robust={:.4}, d_score={:.4})", self.n, self.v_fitness, self.v_robust, self.d_score)
    }
}

/// Runs region deletion and translated test sets, then scores the model.
#[pyfunction]
#[pyo3(signature = (model, data, n = 3, t = 5.0))]
fn diagnose(py: Python<'_>, model: &PyModel, data: &PyDataset, n: usize, t: f64) -> PyResult<PyReport> {
    let r = py.detach(|| core::diagnose(&model.inner, &data.inner, n, t)).map_err(py_err)?;
    Ok(PyReport {
        toml: r.to_toml().map_err(py_err)?,
        n: r.n,
        t: r.t,
        classes: r.classes,
        original_accuracy: r.original_accuracy,
        feature: r.feature,
        attention: r.attention,
        attention_raw: r.attention_raw,
        feature_raw: r.feature_raw,
        v_fitness: r.v_fitness,
        v_robust: r.v_robust,
        g_n: r.g_n,
        d_score: r.d_score,
        p: r.p,
        feature_fallback: r.flags.feature_fallback,
    })
}

#[pymodule]
fn dscore(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(g_bound, m)?)?;
    m.add_function(wrap_pyfunction!(fitness, m)?)?;
    m.add_function(wrap_pyfunction!(robustness, m)?)?;
    m.add_function(wrap_pyfunction!(d_score, m)?)?;
    m.add_function(wrap_pyfunction!(pad_amounts, m)?)?;
    m.add_function(wrap_pyfunction!(partition, m)?)?;
    m.add_function(wrap_pyfunction!(make_plan, m)?)?;
    m.add_function(wrap_pyfunction!(gen_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(diagnose, m)?)?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyReport>()?;
    Ok(())
}
