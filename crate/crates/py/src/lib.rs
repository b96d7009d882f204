//! Python bindings: volumes, phantoms, QIF, CNNs, forests, logistic
//! models, metrics and the CLI entry point.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use nodx::classifiers::{self, ForestModel, LogisticModel};
use nodx::consensus::Label;
use nodx::ingest::CtVolume;
use nodx::nn::{self, Arch, NetworkModel};
use nodx::{eval, phantom, qif, seed, Error};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn labels_from(y: &[u8]) -> PyResult<Vec<Label>> {
    y.iter()
        .map(|&v| match v {
            0 => Ok(Label::Negative),
            1 => Ok(Label::Positive),
            _ => Err(PyValueError::new_err(format!("label {v} is not 0/1"))),
        })
        .collect()
}

#[pyclass(name = "Volume", module = "nodx_py")]
struct PyVolume {
    inner: CtVolume,
}

#[pymethods]
impl PyVolume {
    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: nodx::ingest::parse_volume(&path).map_err(py_err)?,
        })
    }

    #[getter]
    fn patient_id(&self) -> String {
        self.inner.patient_id.clone()
    }

    #[getter]
    fn dims(&self) -> [usize; 3] {
        self.inner.dims
    }

    #[getter]
    fn spacing_mm(&self) -> [f64; 3] {
        self.inner.spacing_mm
    }

    fn hu(&self, x: usize, y: usize, z: usize) -> PyResult<i16> {
        let [w, h, d] = self.inner.dims;
        if x >= w || y >= h || z >= d {
            return Err(PyValueError::new_err("voxel out of bounds"));
        }
        Ok(self.inner.get(x, y, z))
    }

    fn min_max_hu(&self) -> (i16, i16) {
        self.inner.min_max_hu()
    }

    /// QIF vector of the region grown around `center` (voxel coordinates).
    fn qif_at(&self, center: [f64; 3]) -> PyResult<Vec<f64>> {
        let mask = qif::auto_segment(&self.inner, center).map_err(py_err)?;
        Ok(qif::compute_features(&self.inner, &mask)
            .map_err(py_err)?
            .into_values())
    }

    fn __repr__(&self) -> String {
        format!("Volume({}, dims={:?})", self.inner.patient_id, self.inner.dims)
    }
}

#[pyclass(name = "Network", module = "nodx_py")]
struct PyNetwork {
    inner: NetworkModel,
}

#[pymethods]
impl PyNetwork {
    #[new]
    #[pyo3(signature = (arch, seed=0))]
    fn new(arch: &str, seed: u64) -> PyResult<Self> {
        let arch: Arch = arch.parse().map_err(py_err)?;
        Ok(Self {
            inner: nn::build_network(arch, seed),
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: nn::load_weights(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        nn::save_weights(&self.inner, &path, None, None).map_err(py_err)
    }

    #[getter]
    fn arch(&self) -> Option<String> {
        self.inner.arch.map(|a| a.to_string())
    }

    #[getter]
    fn input_len(&self) -> usize {
        self.inner.input_len()
    }

    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    /// P(positive) per flattened patch.
    fn predict(&self, inputs: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        self.inner.predict_inputs(&inputs).map_err(py_err)
    }

    /// Penultimate-layer activations per flattened patch.
    fn features(&self, inputs: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        self.inner.features_inputs(&inputs).map_err(py_err)
    }

    /// Trains in place; returns the per-epoch held-out losses.
    #[pyo3(signature = (inputs, labels, epochs=300, seed=0, augment=true))]
    fn train(&mut self, inputs: Vec<Vec<f64>>, labels: Vec<u8>, epochs: usize, seed: u64, augment: bool) -> PyResult<Vec<f64>> {
        let cfg = nn::TrainConfig {
            epochs,
            seed,
            augment,
            ..nn::TrainConfig::default()
        };
        let out = nn::train_inputs(self.inner.clone(), &inputs, &labels, &cfg).map_err(py_err)?;
        self.inner = out.checkpoints.selected().clone();
        Ok(out.log.iter().map(|l| l.heldout_loss).collect())
    }
}

#[pyclass(name = "Forest", module = "nodx_py")]
struct PyForest {
    inner: ForestModel,
}

#[pymethods]
impl PyForest {
    #[staticmethod]
    #[pyo3(signature = (x, y, n_trees=1000, seed=0))]
    fn train(x: Vec<Vec<f64>>, y: Vec<u8>, n_trees: usize, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: classifiers::train_forest(&x, &y, n_trees, seed).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: classifiers::load_forest(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        classifiers::save_forest(&self.inner, &path).map_err(py_err)
    }

    #[getter]
    fn n_trees(&self) -> usize {
        self.inner.n_trees()
    }

    #[getter]
    fn mtry(&self) -> usize {
        self.inner.mtry
    }

    fn predict_proba(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        classifiers::forest_proba_many(&self.inner, &x).map_err(py_err)
    }
}

#[pyclass(name = "Logistic", module = "nodx_py")]
struct PyLogistic {
    inner: LogisticModel,
}

#[pymethods]
impl PyLogistic {
    #[staticmethod]
    fn fit(x: Vec<f64>, y: Vec<u8>) -> PyResult<Self> {
        Ok(Self {
            inner: classifiers::fit_logistic(&x, &y).map_err(py_err)?,
        })
    }

    #[getter]
    fn intercept(&self) -> f64 {
        self.inner.intercept
    }

    #[getter]
    fn slope(&self) -> f64 {
        self.inner.slope
    }

    #[getter]
    fn converged(&self) -> bool {
        self.inner.converged
    }

    fn predict_proba(&self, x: Vec<f64>) -> Vec<f64> {
        x.iter().map(|&v| classifiers::logistic_proba(&self.inner, v)).collect()
    }
}

#[pyfunction]
fn sub_seed(seed: u64, name: &str) -> u64 {
    seed::sub_seed(seed, name)
}

#[pyfunction]
fn auc(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<f64> {
    eval::auc(&scores, &labels).map_err(py_err)
}

#[pyfunction]
fn roc_points(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<Vec<(f64, f64)>> {
    eval::roc_points(&scores, &labels).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (patients, labels, train_fraction=0.8, balance=true, seed=0))]
fn split_by_patient(
    patients: Vec<String>,
    labels: Vec<u8>,
    train_fraction: f64,
    balance: bool,
    seed: u64,
) -> PyResult<(Vec<usize>, Vec<usize>)> {
    let p: Vec<&str> = patients.iter().map(String::as_str).collect();
    eval::split_by_patient(&p, &labels_from(&labels)?, train_fraction, balance, seed).map_err(py_err)
}

#[pyfunction]
fn qif_feature_names() -> Vec<&'static str> {
    qif::REGISTRY.iter().map(|f| f.name).collect()
}

/// Writes a phantom study set; returns the manifest as JSON text.
#[pyfunction]
#[pyo3(signature = (out_dir, n_patients, seed=0, benign=1, malignant=1, non_nodules=1))]
fn generate_phantom(
    out_dir: PathBuf,
    n_patients: usize,
    seed: u64,
    benign: usize,
    malignant: usize,
    non_nodules: usize,
) -> PyResult<String> {
    let cfg = phantom::PhantomConfig {
        n_patients,
        benign_per_patient: benign,
        malignant_per_patient: malignant,
        non_nodules_per_patient: non_nodules,
        seed,
        ..phantom::PhantomConfig::default()
    };
    let m = phantom::generate_phantom(&cfg, &out_dir).map_err(py_err)?;
    serde_json::to_string(&m).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Runs the command line with `args` (without the program name); returns the exit code.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> i32 {
    let argv: Vec<String> = std::iter::once("nodx".to_string()).chain(args).collect();
    py.detach(|| nodx::cli::run(argv))
}

#[pymodule]
fn nodx_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyVolume>()?;
    m.add_class::<PyNetwork>()?;
    m.add_class::<PyForest>()?;
    m.add_class::<PyLogistic>()?;
    m.add_function(wrap_pyfunction!(sub_seed, m)?)?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add_function(wrap_pyfunction!(roc_points, m)?)?;
    m.add_function(wrap_pyfunction!(split_by_patient, m)?)?;
    m.add_function(wrap_pyfunction!(qif_feature_names, m)?)?;
    m.add_function(wrap_pyfunction!(generate_phantom, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
