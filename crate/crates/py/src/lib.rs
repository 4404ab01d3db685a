//! Python bindings. Matrices cross the boundary as lists of rows.

use std::path::PathBuf;
use std::sync::Arc;

use nalgebra::DMatrix;
use pyo3::exceptions::{PyArithmeticError, PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use simfsvgd::evaluation::{self, Predictor};
use simfsvgd::experiments::{self, Cell, Method};
use simfsvgd::kernels::{IsotropicKernel, KernelFamily};
use simfsvgd::linalg;
use simfsvgd::score::{NuMethodConfig, SampleBatch, ScoreEstimator, ScoreModel, SsgeConfig};
use simfsvgd::sim_priors::DomainModel;
use simfsvgd::simulators::{PendulumParams, PendulumTransition, RealPendulumParams, RealPendulumTransition};
use simfsvgd::trainers::EnsemblePredictor;

fn to_py(e: simfsvgd::Error) -> PyErr {
    use simfsvgd::Error as E;
    match e {
        E::InvalidArgument(_) | E::Config(_) => PyValueError::new_err(e.to_string()),
        E::NumericFailure(_) => PyArithmeticError::new_err(e.to_string()),
        E::Io(_) => PyOSError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Row lists → matrix; all rows must have the same length.
pub fn matrix(rows: &[Vec<f64>]) -> simfsvgd::Result<DMatrix<f64>> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(simfsvgd::Error::InvalidArgument("rows have different lengths".into()));
    }
    Ok(linalg::from_rows(rows, ncols))
}

/// Estimator by name with library defaults, or from its full JSON form.
pub fn estimator_from(name: &str, config_json: Option<&str>) -> simfsvgd::Result<ScoreEstimator> {
    if let Some(text) = config_json {
        return Ok(serde_json::from_str(text)?);
    }
    Ok(match name {
        "gaussian" => ScoreEstimator::Gaussian {
            jitter: simfsvgd::score::Jitter::Absolute(1e-8),
        },
        "ssge" => ScoreEstimator::Ssge(SsgeConfig::default()),
        "nu_method" => ScoreEstimator::NuMethod(NuMethodConfig::default()),
        "tikhonov" => ScoreEstimator::Tikhonov(NuMethodConfig {
            tikhonov_lambda: Some(1e-3),
            ..NuMethodConfig::default()
        }),
        other => {
            return Err(simfsvgd::Error::InvalidArgument(format!(
                "unknown estimator `{other}` (gaussian, ssge, nu_method, tikhonov)"
            )))
        }
    })
}

pub fn method_from(name: &str) -> simfsvgd::Result<Method> {
    Ok(serde_json::from_value(serde_json::Value::String(name.to_string()))?)
}

#[pyclass(name = "Kernel", frozen)]
struct PyKernel(IsotropicKernel);

#[pymethods]
impl PyKernel {
    #[new]
    #[pyo3(signature = (family = "rbf", variance = 1.0, lengthscale = 1.0))]
    fn new(family: &str, variance: f64, lengthscale: f64) -> PyResult<Self> {
        let family = match family {
            "rbf" => KernelFamily::Rbf,
            "imq" => KernelFamily::Imq,
            f => return Err(PyValueError::new_err(format!("unknown kernel family `{f}`"))),
        };
        IsotropicKernel::new(family, variance, lengthscale).map(Self).map_err(to_py)
    }

    fn __call__(&self, x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
        self.0.eval(&x, &y).map_err(to_py)
    }

    /// Gradient with respect to the first argument.
    fn grad_x(&self, x: Vec<f64>, y: Vec<f64>) -> PyResult<Vec<f64>> {
        self.0.grad_x(&x, &y).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!("{:?}", self.0)
    }
}

/// Score estimate at `queries` from `samples` (both lists of rows).
#[pyfunction]
#[pyo3(signature = (samples, queries, estimator = "gaussian", config_json = None))]
fn estimate_score(
    samples: Vec<Vec<f64>>,
    queries: Vec<Vec<f64>>,
    estimator: &str,
    config_json: Option<&str>,
) -> PyResult<Vec<Vec<f64>>> {
    let run = || -> simfsvgd::Result<Vec<Vec<f64>>> {
        let est = estimator_from(estimator, config_json)?;
        let fitted = est.fit(&SampleBatch::new(matrix(&samples)?)?)?;
        Ok(linalg::rows(&fitted.score_matrix(&matrix(&queries)?)?))
    };
    run().map_err(to_py)
}

/// Ideal-pendulum state differences for rows `[θ, θ̇, u]`, `phi = [m, l, I, C_m]`.
#[pyfunction]
#[pyo3(signature = (x, phi, dt = 1.0 / 30.0, gravity = 9.81))]
fn pendulum_step(x: Vec<Vec<f64>>, phi: Vec<f64>, dt: f64, gravity: f64) -> PyResult<Vec<Vec<f64>>> {
    let run = || -> simfsvgd::Result<Vec<Vec<f64>>> {
        let sim = PendulumTransition::new(dt, 10, gravity)?;
        Ok(linalg::rows(&sim.query_set(&matrix(&x)?, &phi)?))
    };
    run().map_err(to_py)
}

/// "Real" pendulum (drag, friction, motor lag) with default gap parameters.
#[pyfunction]
#[pyo3(signature = (x, dt = 1.0 / 30.0))]
fn real_pendulum_step(x: Vec<Vec<f64>>, dt: f64) -> PyResult<Vec<Vec<f64>>> {
    let run = || -> simfsvgd::Result<Vec<Vec<f64>>> {
        let sys = RealPendulumTransition::new(RealPendulumParams::default(), dt, 10)?;
        Ok(linalg::rows(&sys.query_set(&matrix(&x)?, &[])?))
    };
    run().map_err(to_py)
}

/// Default ideal-pendulum parameters as `[m, l, I, C_m]`.
#[pyfunction]
fn default_pendulum_phi() -> Vec<f64> {
    PendulumParams::default().to_phi().to_vec()
}

#[pyclass(name = "EvalRecord", frozen, get_all, skip_from_py_object)]
#[derive(Clone)]
struct PyEvalRecord {
    method: String,
    n_train: usize,
    seed: u64,
    nll: f64,
    rmse: f64,
    coverage_90: f64,
}

impl From<evaluation::EvalRecord> for PyEvalRecord {
    fn from(r: evaluation::EvalRecord) -> Self {
        Self {
            method: r.method,
            n_train: r.n_train,
            seed: r.seed,
            nll: r.nll,
            rmse: r.rmse,
            coverage_90: r.coverage_90,
        }
    }
}

#[pymethods]
impl PyEvalRecord {
    fn __repr__(&self) -> String {
        format!(
            "EvalRecord(method={:?}, n_train={}, seed={}, nll={:.4}, rmse={:.4}, coverage_90={:.3})",
            self.method, self.n_train, self.seed, self.nll, self.rmse, self.coverage_90
        )
    }
}

/// Experiment configuration (sinusoid or pendulum study).
#[pyclass(name = "ExperimentConfig")]
struct PyExperimentConfig(experiments::ExperimentConfig);

#[pymethods]
impl PyExperimentConfig {
    #[staticmethod]
    fn sinusoid() -> Self {
        Self(experiments::ExperimentConfig::sinusoid())
    }

    #[staticmethod]
    fn pendulum() -> Self {
        Self(experiments::ExperimentConfig::pendulum())
    }

    /// Apply a `key.path=value` override (value parsed as JSON when possible).
    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.0 = experiments::load_config(&self.0, None, &[format!("{key}={value}")]).map_err(to_py)?;
        Ok(())
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(&self.0).map_err(|e| to_py(e.into()))
    }

    /// `(train_x, train_y, test_x, test_y)` for one seed.
    fn dataset(&self, n_train: usize, seed: u64) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let (tr, te) = self.0.dataset(n_train, seed).map_err(to_py)?;
        Ok((
            linalg::rows(&tr.inputs),
            linalg::rows(&tr.targets),
            linalg::rows(&te.inputs),
            linalg::rows(&te.targets),
        ))
    }

    /// Train and evaluate one `(method, n_train, seed)` cell.
    fn run_cell(&self, py: Python<'_>, method: &str, n_train: usize, seed: u64) -> PyResult<PyEvalRecord> {
        let cell = Cell {
            method: method_from(method).map_err(to_py)?,
            n_train,
            seed,
        };
        let cfg = self.0.clone();
        py.detach(move || experiments::run_cell(&cfg, &cell))
            .map(|o| o.record.into())
            .map_err(to_py)
    }

    /// Run every cell into `out` (resumable) and return the records.
    #[pyo3(signature = (out, jobs = 1))]
    fn run(&self, py: Python<'_>, out: PathBuf, jobs: usize) -> PyResult<Vec<PyEvalRecord>> {
        let cfg = self.0.clone();
        py.detach(move || experiments::run_experiment(&cfg, &out, jobs))
            .map(|rs| rs.into_iter().map(Into::into).collect())
            .map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!(
            "ExperimentConfig(experiment={:?}, methods={:?}, n_train={:?}, seeds={:?})",
            self.0.experiment,
            self.0.methods.iter().map(Method::name).collect::<Vec<_>>(),
            self.0.n_train,
            self.0.seeds
        )
    }
}

/// A trained particle ensemble loaded from a checkpoint file.
#[pyclass(name = "Ensemble")]
struct PyEnsemble(EnsemblePredictor);

#[pymethods]
impl PyEnsemble {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = simfsvgd::bnn::Checkpoint::load(&path).map_err(to_py)?;
        let ensemble = ck.ensemble().map_err(to_py)?;
        Ok(Self(EnsemblePredictor {
            model: Arc::new(ck.model),
            ensemble,
            likelihood: ck.likelihood,
        }))
    }

    #[getter]
    fn num_particles(&self) -> usize {
        self.0.ensemble.len()
    }

    /// Per-particle mean predictions (`L` matrices) and the noise std matrix.
    fn predict(&self, x: Vec<Vec<f64>>) -> PyResult<(Vec<Vec<Vec<f64>>>, Vec<Vec<f64>>)> {
        let pred = matrix(&x).and_then(|x| self.0.predict(&x)).map_err(to_py)?;
        Ok((pred.means.iter().map(linalg::rows).collect(), linalg::rows(&pred.std)))
    }

    /// Mixture negative log-likelihood per test point.
    fn nll(&self, x: Vec<Vec<f64>>, y: Vec<Vec<f64>>) -> PyResult<f64> {
        let run = || -> simfsvgd::Result<f64> {
            let pred = self.0.predict(&matrix(&x)?)?;
            evaluation::predictive_nll(&pred, &matrix(&y)?)
        };
        run().map_err(to_py)
    }

    fn rmse(&self, x: Vec<Vec<f64>>, y: Vec<Vec<f64>>) -> PyResult<f64> {
        let run = || -> simfsvgd::Result<f64> {
            let pred = self.0.predict(&matrix(&x)?)?;
            evaluation::rmse(&pred, &matrix(&y)?)
        };
        run().map_err(to_py)
    }
}

/// Score-estimator benchmark rows `(estimator, dim, m, seed, cosine, rel_l2)`.
#[pyfunction]
#[pyo3(signature = (sets = Vec::new()))]
fn score_bench(py: Python<'_>, sets: Vec<String>) -> PyResult<Vec<(String, usize, usize, u64, f64, f64)>> {
    let run = move || -> simfsvgd::Result<_> {
        let cfg = experiments::load_config(&experiments::ScoreBenchConfig::default(), None, &sets)?;
        Ok(experiments::score_bench(&cfg)?
            .into_iter()
            .map(|r| (r.estimator, r.dim, r.m, r.seed, r.cosine, r.rel_l2))
            .collect())
    };
    py.detach(run).map_err(to_py)
}

#[pymodule]
fn simfsvgd_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", experiments::VERSION)?;
    m.add_class::<PyKernel>()?;
    m.add_class::<PyEvalRecord>()?;
    m.add_class::<PyExperimentConfig>()?;
    m.add_class::<PyEnsemble>()?;
    m.add_function(wrap_pyfunction!(estimate_score, m)?)?;
    m.add_function(wrap_pyfunction!(pendulum_step, m)?)?;
    m.add_function(wrap_pyfunction!(real_pendulum_step, m)?)?;
    m.add_function(wrap_pyfunction!(default_pendulum_phi, m)?)?;
    m.add_function(wrap_pyfunction!(score_bench, m)?)?;
    Ok(())
}
