//! Python bindings. Reports cross the boundary as plain dicts and lists.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use serde::Serialize;

use oddforge_core::eval::confusion_accumulate;
use oddforge_core::fixtures;
use oddforge_core::sweep;
use oddforge_core::{iou_from_matrix, CategoryRegistry, Config, SemanticMask, VerdictKind};

create_exception!(oddforge, OddforgeError, PyException);

fn err(e: oddforge_core::Error) -> PyErr {
    OddforgeError::new_err(e.to_string())
}

fn to_py<T: Serialize>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| OddforgeError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

/// One harness run, opened from a config file.
#[pyclass]
struct Workspace {
    inner: oddforge_core::Workspace,
}

#[pymethods]
impl Workspace {
    #[new]
    fn new(py: Python<'_>, config: PathBuf) -> PyResult<Self> {
        let inner = py
            .detach(|| Config::load(&config).and_then(oddforge_core::Workspace::open))
            .map_err(err)?;
        Ok(Self { inner })
    }

    /// Reopens a stored run.
    #[staticmethod]
    fn resume(store: PathBuf, run_id: &str) -> PyResult<Self> {
        let inner = oddforge_core::Workspace::resume(&store, run_id).map_err(err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn run_id(&self) -> String {
        self.inner.run_id().to_string()
    }

    #[getter]
    fn run_dir(&self) -> PathBuf {
        self.inner.run_dir()
    }

    fn manifest(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, self.inner.manifest())
    }

    fn encode(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        let out = py.detach(|| self.inner.encode()).map_err(err)?;
        to_py(py, &serde_json::json!({ "scenes": out.scenes, "regions": out.regions, "path": out.path }))
    }

    /// Clusters the style space and returns the catalog.
    fn cluster(&mut self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        let catalog = py.detach(|| self.inner.cluster()).map_err(err)?;
        to_py(py, &catalog)
    }

    fn catalog(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.catalog().map_err(err)?)
    }

    fn label(&mut self, py: Python<'_>, category: &str, cluster: usize, concept: &str) -> PyResult<Py<PyAny>> {
        let catalog = self.inner.label(category, cluster, concept).map_err(err)?;
        to_py(py, &catalog)
    }

    /// Renders and scores the condition suite; returns the suite results.
    fn suite(&mut self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        let out = py.detach(|| self.inner.suite()).map_err(err)?;
        to_py(py, &out.results)
    }

    #[pyo3(signature = (scene, to, from_ = "original", steps = None, focus = None))]
    fn sweep(
        &self,
        py: Python<'_>,
        scene: &str,
        to: &str,
        from_: &str,
        steps: Option<usize>,
        focus: Option<&str>,
    ) -> PyResult<Py<PyAny>> {
        let result = py
            .detach(|| self.inner.sweep(scene, from_, to, steps, focus))
            .map_err(err)?;
        to_py(py, &result)
    }

    /// Compliance under the current verdicts, without persisting it.
    fn compliance(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.compliance().map_err(err)?)
    }

    /// Persists the compliance report; returns `(report, exit_code)`.
    fn comply(&self, py: Python<'_>) -> PyResult<(Py<PyAny>, i32)> {
        let out = self.inner.comply().map_err(err)?;
        Ok((to_py(py, &out.report)?, out.report.exit_code()))
    }

    #[pyo3(signature = (scene, sample, reject, reason = "", author = ""))]
    fn verdict(
        &self,
        py: Python<'_>,
        scene: &str,
        sample: &str,
        reject: bool,
        reason: &str,
        author: &str,
    ) -> PyResult<Py<PyAny>> {
        let kind = if reject {
            VerdictKind::Rejected
        } else {
            VerdictKind::Accepted
        };
        let ack = self
            .inner
            .record_verdict(scene, sample, kind, reason, author)
            .map_err(err)?;
        to_py(py, &ack)
    }
}

/// Per-category IoU of a flat prediction against ground truth, over the
/// RailSem19 categories (255 in `gt` is ignored).
#[pyfunction]
fn iou(py: Python<'_>, gt: Vec<u8>, pred: Vec<u8>, width: u32, height: u32) -> PyResult<Py<PyAny>> {
    let registry = CategoryRegistry::railsem19();
    let gt = SemanticMask::new(width, height, gt).map_err(err)?;
    let pred = SemanticMask::new(width, height, pred).map_err(err)?;
    let m = confusion_accumulate(&gt, &pred, &registry).map_err(err)?;
    to_py(py, &iou_from_matrix(&m))
}

#[pyfunction]
#[pyo3(signature = (series, threshold = sweep::DEFAULT_DROP_THRESHOLD))]
fn detect_drops(py: Python<'_>, series: Vec<f64>, threshold: f64) -> PyResult<Py<PyAny>> {
    to_py(py, &sweep::detect_drops(&series, threshold).map_err(err)?)
}

/// Writes the synthetic rail dataset and its config under `root`.
#[pyfunction]
#[pyo3(signature = (root, scenes = 5, per_weather = 3))]
fn write_demo(py: Python<'_>, root: PathBuf, scenes: usize, per_weather: usize) -> PyResult<Py<PyAny>> {
    to_py(py, &fixtures::write_demo(&root, scenes, per_weather).map_err(err)?)
}

#[pymodule]
fn oddforge(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("OddforgeError", m.py().get_type::<OddforgeError>())?;
    m.add_class::<Workspace>()?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(detect_drops, m)?)?;
    m.add_function(wrap_pyfunction!(write_demo, m)?)?;
    Ok(())
}
