//! Python bindings: networks, the synthetic benchmark, concept probes,
//! mediation effects, the surrogate tree and the full pipeline.
//!
//! Images and activations cross the boundary as flat `list[float]` in
//! height-width-channel order.

use std::path::PathBuf;

use causal_concepts::counterfactual::Pair;
use causal_concepts::net::{self, LayeredNetwork, Tensor, TrainConfig};
use causal_concepts::pipeline::{self, PipelineConfig};
use causal_concepts::probe::{self, ConceptModel, Vectorization};
use causal_concepts::surrogate::{self, FeatureMatrix, SurrogateTree};
use causal_concepts::synth::{self, Dataset, SynthConfig};
use causal_concepts::{mediation, metrics, Granularity, UnitSet};
use pyo3::exceptions::{PyArithmeticError, PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::de::DeserializeOwned;

fn err(e: causal_concepts::Error) -> PyErr {
    let msg = e.to_string();
    match (&e, e.exit_code()) {
        (causal_concepts::Error::Io(_), _) => PyOSError::new_err(msg),
        (_, 1) => PyValueError::new_err(msg),
        (_, 3) => PyArithmeticError::new_err(msg),
        _ => PyRuntimeError::new_err(msg),
    }
}

fn parse<T: DeserializeOwned + Default>(json: Option<&str>) -> PyResult<T> {
    match json {
        Some(s) => serde_json::from_str(s).map_err(|e| PyValueError::new_err(format!("invalid config JSON: {e}"))),
        None => Ok(T::default()),
    }
}

fn tensor(shape: &[usize], data: Vec<f64>) -> PyResult<Tensor> {
    Tensor::new(shape.to_vec(), data).map_err(err)
}

#[pyclass(name = "Network", module = "causal_concepts_py")]
struct PyNetwork {
    inner: LayeredNetwork,
}

impl PyNetwork {
    fn input(&self, x: Vec<f64>) -> PyResult<Tensor> {
        tensor(self.inner.input_shape(), x)
    }

    fn pair(&self, x: Vec<f64>, x_prime: Vec<f64>, target: usize) -> PyResult<Pair> {
        Ok(Pair {
            x: self.input(x)?,
            x_prime: self.input(x_prime)?,
            target,
        })
    }

    fn units(&self, split: usize, units: Vec<usize>, channel: bool) -> UnitSet {
        let g = if channel { Granularity::Channel } else { Granularity::Scalar };
        UnitSet::new(units, g, split)
    }
}

#[pymethods]
impl PyNetwork {
    /// conv3x3(8) → relu → maxpool → conv3x3(16) → relu → flatten → dense(32) → relu → dense → softmax.
    #[staticmethod]
    #[pyo3(signature = (height=16, width=16, channels=1, classes=2, seed=0))]
    fn default_architecture(height: usize, width: usize, channels: usize, classes: usize, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: LayeredNetwork::default_architecture(height, width, channels, classes, seed).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: LayeredNetwork::load(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    #[getter]
    fn input_shape(&self) -> Vec<usize> {
        self.inner.input_shape().to_vec()
    }

    #[getter]
    fn split_candidates(&self) -> Vec<usize> {
        self.inner.split_candidates().to_vec()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    fn activation_shape(&self, split: usize) -> PyResult<Vec<usize>> {
        Ok(self.inner.activation_shape(split).map_err(err)?.to_vec())
    }

    /// Class probabilities.
    fn forward(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.forward(&self.input(x)?).map_err(err)
    }

    /// Flat activation after layer `split`.
    fn forward_split(&self, x: Vec<f64>, split: usize) -> PyResult<Vec<f64>> {
        Ok(self.inner.forward_split(&self.input(x)?, split).map_err(err)?.tensor.data().to_vec())
    }

    /// Gradient of `log p_target` with respect to the input pixels.
    fn input_gradient(&self, x: Vec<f64>, target: usize) -> PyResult<Vec<f64>> {
        Ok(self.inner.input_gradient(&self.input(x)?, target).map_err(err)?.data().to_vec())
    }

    /// Returns a trained copy; `config_json` overrides training defaults.
    #[pyo3(signature = (images, labels, config_json=None))]
    fn train(&self, py: Python<'_>, images: Vec<Vec<f64>>, labels: Vec<usize>, config_json: Option<&str>) -> PyResult<Self> {
        let cfg: TrainConfig = parse(config_json)?;
        let xs = images.into_iter().map(|x| self.input(x)).collect::<PyResult<Vec<_>>>()?;
        let inner = py.detach(|| net::train(&self.inner, &xs, &labels, &cfg)).map_err(err)?;
        Ok(Self { inner })
    }

    fn accuracy(&self, images: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<f64> {
        let xs = images.into_iter().map(|x| self.input(x)).collect::<PyResult<Vec<_>>>()?;
        net::accuracy(&self.inner, &xs, &labels).map_err(err)
    }

    /// `f_t(x with units spliced from x′) / f_t(x) − 1`.
    #[pyo3(signature = (split, x, x_prime, target, units, channel=false))]
    fn indirect_effect(&self, split: usize, x: Vec<f64>, x_prime: Vec<f64>, target: usize, units: Vec<usize>, channel: bool) -> PyResult<f64> {
        let pair = self.pair(x, x_prime, target)?;
        mediation::indirect_effect(&self.inner, split, &pair, &self.units(split, units, channel)).map_err(err)
    }

    /// `f_t(x′ with units held at x) / f_t(x) − 1`.
    #[pyo3(signature = (split, x, x_prime, target, units, channel=false))]
    fn direct_effect(&self, split: usize, x: Vec<f64>, x_prime: Vec<f64>, target: usize, units: Vec<usize>, channel: bool) -> PyResult<f64> {
        let pair = self.pair(x, x_prime, target)?;
        mediation::direct_effect(&self.inner, split, &pair, &self.units(split, units, channel)).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!(
            "Network(input_shape={:?}, splits={:?}, classes={})",
            self.inner.input_shape(),
            self.inner.split_candidates(),
            self.inner.num_classes()
        )
    }
}

#[pyclass(name = "Dataset", module = "causal_concepts_py")]
struct PyDataset {
    inner: Dataset,
}

fn images(samples: &[synth::Sample]) -> Vec<Vec<f64>> {
    samples.iter().map(|s| s.x.data().to_vec()).collect()
}

#[pymethods]
impl PyDataset {
    /// Synthetic benchmark; `config_json` overrides generator defaults.
    #[staticmethod]
    #[pyo3(signature = (config_json=None, seed=None))]
    fn generate(config_json: Option<&str>, seed: Option<u64>) -> PyResult<Self> {
        let mut cfg: SynthConfig = parse(config_json)?;
        if let Some(s) = seed {
            cfg.seed = s;
        }
        Ok(Self {
            inner: synth::generate(&cfg).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: Dataset::load(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    #[getter]
    fn image_shape(&self) -> Vec<usize> {
        let g = self.inner.config.grid_size;
        vec![g, g, 1]
    }

    #[getter]
    fn causal_set(&self) -> Vec<usize> {
        synth::ground_truth(&self.inner.config).into_iter().collect()
    }

    #[getter]
    fn train_images(&self) -> Vec<Vec<f64>> {
        images(&self.inner.train)
    }

    #[getter]
    fn test_images(&self) -> Vec<Vec<f64>> {
        images(&self.inner.test)
    }

    #[getter]
    fn train_labels(&self) -> Vec<usize> {
        self.inner.train.iter().map(|s| s.y).collect()
    }

    #[getter]
    fn test_labels(&self) -> Vec<usize> {
        self.inner.test.iter().map(|s| s.y).collect()
    }

    /// Observed concept labels (1, 0, or -1 for missing), one row per sample.
    #[getter]
    fn train_concepts(&self) -> Vec<Vec<i8>> {
        self.inner.train.iter().map(|s| s.c.clone()).collect()
    }

    #[getter]
    fn test_concepts(&self) -> Vec<Vec<i8>> {
        self.inner.test.iter().map(|s| s.c.clone()).collect()
    }

    fn __len__(&self) -> usize {
        self.inner.train.len() + self.inner.test.len()
    }
}

#[pyclass(name = "ConceptModel", module = "causal_concepts_py")]
struct PyConceptModel {
    inner: ConceptModel,
}

#[pymethods]
impl PyConceptModel {
    #[getter]
    fn concept_id(&self) -> usize {
        self.inner.concept_id
    }

    #[getter]
    fn beta(&self) -> Vec<f64> {
        self.inner.beta.clone()
    }

    #[getter]
    fn intercept(&self) -> f64 {
        self.inner.intercept
    }

    #[getter]
    fn lam(&self) -> f64 {
        self.inner.lambda
    }

    #[getter]
    fn split(&self) -> usize {
        self.inner.split
    }

    /// Indices of the nonzero coefficients.
    #[getter]
    fn units(&self) -> Vec<usize> {
        self.inner.units.indices().to_vec()
    }

    /// `βᵀv + b` for an already vectorized activation.
    fn logit(&self, v: Vec<f64>) -> PyResult<f64> {
        probe::logit_of_vector(&self.inner, &v).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!(
            "ConceptModel(concept_id={}, split={}, lam={}, units={})",
            self.inner.concept_id,
            self.inner.split,
            self.inner.lambda,
            self.inner.units.len()
        )
    }
}

/// L1-penalized logistic probe on flat activation vectors.
#[pyfunction]
#[pyo3(signature = (acts, labels, lam, concept_id=0, split=0))]
fn fit_concept(py: Python<'_>, acts: Vec<Vec<f64>>, labels: Vec<u8>, lam: f64, concept_id: usize, split: usize) -> PyResult<PyConceptModel> {
    let inner = py
        .detach(|| probe::fit_concept(concept_id, split, Vectorization::Flatten, &acts, &labels, lam))
        .map_err(err)?;
    Ok(PyConceptModel { inner })
}

/// Stratified k-fold choice of λ; returns `(lambda, folds_used)`.
#[pyfunction]
#[pyo3(signature = (acts, labels, grid=None, folds=10, seed=0))]
fn select_lambda(py: Python<'_>, acts: Vec<Vec<f64>>, labels: Vec<u8>, grid: Option<Vec<f64>>, folds: usize, seed: u64) -> PyResult<(f64, usize)> {
    let grid = grid.unwrap_or_else(probe::default_lambda_grid);
    let sel = py.detach(|| probe::select_lambda(&acts, &labels, &grid, folds, seed)).map_err(err)?;
    Ok((sel.lambda, sel.folds))
}

#[pyfunction]
fn default_lambda_grid() -> Vec<f64> {
    probe::default_lambda_grid()
}

#[pyfunction]
fn roc_auc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    metrics::roc_auc(&scores, &labels).map_err(err)
}

#[pyclass(name = "Tree", module = "causal_concepts_py")]
struct PyTree {
    inner: SurrogateTree,
}

#[pymethods]
impl PyTree {
    #[getter]
    fn depth(&self) -> usize {
        self.inner.depth()
    }

    fn predict(&self, row: Vec<f64>) -> PyResult<usize> {
        self.inner.predict(&row).map_err(err)
    }

    /// Indented text rendering; `names[i]` labels concept id `i`.
    #[pyo3(signature = (names=None))]
    fn render(&self, names: Option<Vec<String>>) -> String {
        self.inner
            .render(|id| names.as_ref().and_then(|n| n.get(id).cloned()).unwrap_or_else(|| format!("concept_{id}")))
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }
}

/// Entropy-split decision tree on feature rows; `concept_ids` name the columns.
#[pyfunction]
#[pyo3(signature = (rows, targets, max_depth=3, min_leaf=5, concept_ids=None))]
fn fit_tree(rows: Vec<Vec<f64>>, targets: Vec<usize>, max_depth: usize, min_leaf: usize, concept_ids: Option<Vec<usize>>) -> PyResult<PyTree> {
    let width = rows.first().map_or(0, Vec::len);
    let fm = FeatureMatrix {
        concept_ids: concept_ids.unwrap_or_else(|| (0..width).collect()),
        num_classes: targets.iter().max().map_or(2, |m| (m + 1).max(2)),
        rows,
        targets,
    };
    Ok(PyTree {
        inner: surrogate::fit_tree(&fm, max_depth, min_leaf).map_err(err)?,
    })
}

/// Runs every stage into `out`; returns the run manifest as a dict.
#[pyfunction]
#[pyo3(signature = (out, seed=None, config_json=None))]
fn run_all<'py>(py: Python<'py>, out: PathBuf, seed: Option<u64>, config_json: Option<&str>) -> PyResult<Bound<'py, PyAny>> {
    let mut cfg: PipelineConfig = parse(config_json)?;
    cfg.out_dir = out;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let manifest = py.detach(|| pipeline::run_all(&cfg)).map_err(err)?;
    let text = serde_json::to_string(&manifest).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

#[pymodule]
fn causal_concepts_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyNetwork>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyConceptModel>()?;
    m.add_class::<PyTree>()?;
    m.add_function(wrap_pyfunction!(fit_concept, m)?)?;
    m.add_function(wrap_pyfunction!(select_lambda, m)?)?;
    m.add_function(wrap_pyfunction!(default_lambda_grid, m)?)?;
    m.add_function(wrap_pyfunction!(roc_auc, m)?)?;
    m.add_function(wrap_pyfunction!(fit_tree, m)?)?;
    m.add_function(wrap_pyfunction!(run_all, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
