//! Python module `ncd`: puzzle generation, RPMPACK I/O, training and
//! evaluation over the core library.

use std::path::PathBuf;

use ncd_core::checkpoint::Checkpoint;
use ncd_core::config::RunConfig;
use ncd_core::eval::{evaluate, infer_from_logits};
use ncd_core::net::{batch_logits, NcdModel};
use ncd_core::pack;
use ncd_core::problem::ProblemView;
use ncd_core::synth::{generate_all, Attribute, GeneratorConfig, RpmProblem};
use ncd_core::trainer::{initial_model, run_training, TrainConfig};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

create_exception!(ncd, NcdError, PyException, "Raised for configuration, data and numeric failures.");

fn err(e: impl std::fmt::Display) -> PyErr {
    NcdError::new_err(e.to_string())
}

/// One puzzle: 8 context panels and 8 candidates, with its ground truth.
#[pyclass(name = "Problem", module = "ncd", frozen, from_py_object)]
#[derive(Clone)]
struct PyProblem {
    inner: RpmProblem,
}

#[pymethods]
impl PyProblem {
    #[getter]
    fn problem_id(&self) -> u64 {
        self.inner.problem_id
    }

    #[getter]
    fn answer_index(&self) -> u8 {
        self.inner.answer_index
    }

    #[getter]
    fn panel_size(&self) -> u16 {
        self.inner.panel_size()
    }

    /// Rule per attribute, e.g. `{"size": "progression+1", ...}`.
    #[getter]
    fn rules<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let d = PyDict::new(py);
        for a in Attribute::ALL {
            d.set_item(a.name(), self.inner.rules.get(a).name())?;
        }
        Ok(d)
    }

    /// The 16 panels as row-major grayscale bytes.
    fn panels<'py>(&self, py: Python<'py>) -> Vec<Bound<'py, PyBytes>> {
        self.inner.panels.iter().map(|r| PyBytes::new(py, &r.pixels)).collect()
    }

    /// Per candidate, whether it completes the rules; `None` for problems
    /// loaded from disk, which carry no symbolic panels.
    fn candidate_verdicts(&self) -> Option<Vec<bool>> {
        self.inner.candidate_verdicts().map(|v| v.to_vec())
    }

    fn __repr__(&self) -> String {
        format!("Problem(id={}, rules={:?}, answer={})", self.inner.problem_id, self.inner.rules.label(), self.inner.answer_index)
    }
}

/// Network parameters plus architecture switches.
#[pyclass(name = "Model", module = "ncd", frozen)]
struct PyModel {
    inner: NcdModel,
}

#[pymethods]
impl PyModel {
    /// Untrained model initialized from a run config (JSON text); defaults when omitted.
    #[new]
    #[pyo3(signature = (config=None))]
    fn new(config: Option<&str>) -> PyResult<Self> {
        Ok(Self { inner: initial_model(&train_config(config)?) })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::read(&path).map_err(err)?;
        Ok(Self { inner: NcdModel::from_checkpoint(&ck).map_err(err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.to_checkpoint().write(&path).map_err(err)
    }

    /// Ten row scores per problem: two context rows, then one per candidate.
    fn logits(&self, py: Python<'_>, problems: Vec<PyProblem>) -> PyResult<Vec<Vec<f64>>> {
        let logits = py.detach(|| {
            let views: Vec<ProblemView> = problems.iter().map(|p| p.inner.unlabeled()).collect();
            batch_logits(&self.inner, &views)
        });
        Ok(logits.map_err(err)?.iter().map(|l| l.iter().map(|&x| f64::from(x)).collect()).collect())
    }

    /// Chosen candidate index per problem.
    fn predict(&self, py: Python<'_>, problems: Vec<PyProblem>) -> PyResult<Vec<u8>> {
        let logits = py.detach(|| {
            let views: Vec<ProblemView> = problems.iter().map(|p| p.inner.unlabeled()).collect();
            batch_logits(&self.inner, &views)
        });
        Ok(logits.map_err(err)?.iter().map(infer_from_logits).collect())
    }

    /// Accuracy report as a dict (same fields as `ncd eval --json`).
    fn evaluate<'py>(&self, py: Python<'py>, problems: Vec<PyProblem>) -> PyResult<Bound<'py, PyAny>> {
        let test: Vec<RpmProblem> = problems.into_iter().map(|p| p.inner).collect();
        let report = py.detach(|| evaluate(&self.inner, &test, "python", 0)).map_err(err)?;
        let text = serde_json::to_string(&report).map_err(err)?;
        py.import("json")?.call_method1("loads", (text,))
    }
}

fn train_config(config: Option<&str>) -> PyResult<TrainConfig> {
    match config {
        Some(text) => Ok(RunConfig::from_json(text).map_err(err)?.train),
        None => Ok(TrainConfig::default()),
    }
}

/// Default run configuration as JSON text.
#[pyfunction]
fn default_config() -> String {
    RunConfig::default().to_json()
}

/// Generate `count` problems with ids starting at `id_offset`.
#[pyfunction]
#[pyo3(signature = (seed, count, panel_size=32, id_offset=0))]
fn generate(py: Python<'_>, seed: u64, count: usize, panel_size: u16, id_offset: u64) -> PyResult<Vec<PyProblem>> {
    let config = GeneratorConfig { panel_size, id_offset, ..GeneratorConfig::default() };
    let problems = py.detach(|| generate_all(seed, count, &config)).map_err(err)?;
    Ok(problems.into_iter().map(|inner| PyProblem { inner }).collect())
}

#[pyfunction]
fn read_pack(path: PathBuf) -> PyResult<Vec<PyProblem>> {
    Ok(pack::read(&path).map_err(err)?.into_iter().map(|inner| PyProblem { inner }).collect())
}

#[pyfunction]
fn write_pack(path: PathBuf, problems: Vec<PyProblem>) -> PyResult<()> {
    let Some(first) = problems.first() else { return Err(NcdError::new_err("no problems to write")) };
    let size = first.inner.panel_size();
    let problems: Vec<RpmProblem> = problems.into_iter().map(|p| p.inner).collect();
    pack::write(&path, &problems, size).map_err(err)
}

/// Train without labels; returns the model and the per-step loss trace.
/// With `out_dir`, checkpoints and the metrics journal are written there.
#[pyfunction]
#[pyo3(signature = (problems, config=None, out_dir=None, resume=None))]
fn train(
    py: Python<'_>,
    problems: Vec<PyProblem>,
    config: Option<&str>,
    out_dir: Option<PathBuf>,
    resume: Option<PathBuf>,
) -> PyResult<(PyModel, Vec<f64>)> {
    let config = train_config(config)?;
    let outcome = py
        .detach(|| {
            let views: Vec<ProblemView> = problems.iter().map(|p| p.inner.unlabeled()).collect();
            run_training(&views, &config, out_dir.as_deref(), resume.as_deref())
        })
        .map_err(err)?;
    let losses = outcome.metrics.iter().map(|m| m.loss).collect();
    Ok((PyModel { inner: outcome.state.model }, losses))
}

#[pymodule]
fn ncd(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("NcdError", m.py().get_type::<NcdError>())?;
    m.add_class::<PyProblem>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(read_pack, m)?)?;
    m.add_function(wrap_pyfunction!(write_pack, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
