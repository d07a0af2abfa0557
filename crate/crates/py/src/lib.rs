//! Python bindings: config, dataset generation, training, evaluation and
//! the covariance helpers.

use std::path::PathBuf;

use dmuq::config::{RunConfig, Split};
use dmuq::detector::CollabMode;
use dmuq::distributions::{combine_covariance, estimate_sigma_a, estimate_sigma_e};
use dmuq::doublem::UqMethod;
use dmuq::eval::{quad_iou, Quad, ReportRow};
use dmuq::math::CovMatrix;
use dmuq::pipeline;
use dmuq::viz::Ellipse;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

fn err(e: dmuq::Error) -> PyErr {
    PyValueError::new_err(format!("{}: {e}", e.category()))
}

fn parse<T: std::str::FromStr<Err = dmuq::Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(err)
}

fn cov(rows: Vec<Vec<f64>>) -> PyResult<CovMatrix> {
    let dim = rows.len();
    if rows.iter().any(|r| r.len() != dim) {
        return Err(PyValueError::new_err("covariance must be a square list of lists"));
    }
    CovMatrix::new(dim, rows.concat()).map_err(err)
}

fn rows(c: &CovMatrix) -> Vec<Vec<f64>> {
    c.entries().chunks(c.dim()).map(<[f64]>::to_vec).collect()
}

/// Run configuration.
#[pyclass(name = "Config", frozen)]
struct PyConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (toml = None))]
    fn new(toml: Option<&str>) -> PyResult<Self> {
        let inner = match toml {
            Some(t) => t.parse().map_err(err)?,
            None => RunConfig::default(),
        };
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: RunConfig::load(path).map_err(err)? })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }
}

/// One line of a metric report.
#[pyclass(name = "ReportRow", frozen, get_all)]
struct PyReportRow {
    mode: String,
    uq_method: String,
    ap50: Option<f64>,
    ap70: Option<f64>,
    nll50: Option<f64>,
    nll70: Option<f64>,
    n_det: Option<u64>,
    n_gt: Option<u64>,
}

impl From<ReportRow> for PyReportRow {
    fn from(r: ReportRow) -> Self {
        Self {
            mode: r.mode,
            uq_method: r.uq_method,
            ap50: r.ap50,
            ap70: r.ap70,
            nll50: r.nll50,
            nll70: r.nll70,
            n_det: r.n_det,
            n_gt: r.n_gt,
        }
    }
}

#[pymethods]
impl PyReportRow {
    fn __repr__(&self) -> String {
        let f = |v: Option<f64>| v.map_or("None".to_string(), |x| format!("{x:.4}"));
        format!("ReportRow({} {} ap50={} nll50={})", self.mode, self.uq_method, f(self.ap50), f(self.nll50))
    }
}

/// Writes the three splits into `out`; returns `{split: frames}`.
#[pyfunction]
fn generate(config: &PyConfig, out: PathBuf) -> PyResult<Vec<(String, usize)>> {
    let counts = pipeline::write_splits(&config.inner, &out).map_err(err)?;
    Ok(counts.into_iter().map(|(s, n)| (s.to_string(), n)).collect())
}

/// Trains one method and mode; returns the written artifact paths.
#[pyfunction]
fn train(config: &PyConfig, method: &str, mode: &str, data: PathBuf, out: PathBuf) -> PyResult<Vec<PathBuf>> {
    let (method, mode): (UqMethod, CollabMode) = (parse(method)?, parse(mode)?);
    let train = pipeline::load_split(&data, Split::Train).map_err(err)?;
    let val = pipeline::load_split(&data, Split::Val).map_err(err)?;
    let cells = pipeline::train_methods(&config.inner, &[method], mode, &train, &val, &out).map_err(err)?;
    Ok(cells.into_iter().flat_map(|c| std::iter::once(c.checkpoint).chain(c.uqstats)).collect())
}

/// Evaluates the configured grid on a split.
#[pyfunction]
#[pyo3(signature = (config, artifacts, data, split = "test"))]
fn evaluate(config: &PyConfig, artifacts: PathBuf, data: PathBuf, split: &str) -> PyResult<Vec<PyReportRow>> {
    let set = pipeline::load_split(&data, parse(split)?).map_err(err)?;
    let report = pipeline::evaluate(&config.inner, &artifacts, &set).map_err(err)?;
    Ok(report.rows.into_iter().map(Into::into).collect())
}

/// SVG of one frame with a cell's detections.
#[pyfunction]
#[pyo3(signature = (config, artifacts, data, frame, method = "doublem", mode = "inter", split = "test"))]
fn render_frame(
    config: &PyConfig,
    artifacts: PathBuf,
    data: PathBuf,
    frame: usize,
    method: &str,
    mode: &str,
    split: &str,
) -> PyResult<String> {
    let set = pipeline::load_split(&data, parse(split)?).map_err(err)?;
    pipeline::render_frame(&config.inner, &artifacts, parse(method)?, parse(mode)?, &set, frame).map_err(err)
}

#[pyfunction(name = "quad_iou")]
fn py_quad_iou(a: Quad, b: Quad) -> PyResult<f64> {
    quad_iou(&a, &b).map_err(err)
}

/// `Σ_e + ½Σ_a + ½Σ̂`.
#[pyfunction(name = "combine_covariance")]
fn py_combine(sigma_e: Vec<Vec<f64>>, sigma_a: Vec<Vec<f64>>, sigma_hat: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let c = combine_covariance(&cov(sigma_e)?, &cov(sigma_a)?, &cov(sigma_hat)?).map_err(err)?;
    Ok(rows(&c))
}

#[pyfunction(name = "estimate_sigma_e")]
fn py_sigma_e(residuals: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    Ok(rows(&estimate_sigma_e(&residuals).map_err(err)?))
}

#[pyfunction(name = "estimate_sigma_a")]
fn py_sigma_a(covs: Vec<Vec<Vec<f64>>>) -> PyResult<Vec<Vec<f64>>> {
    let covs = covs.into_iter().map(cov).collect::<PyResult<Vec<_>>>()?;
    Ok(rows(&estimate_sigma_a(&covs).map_err(err)?))
}

/// 95% ellipse `(rx, ry, angle)` of a 2×2 covariance.
#[pyfunction]
fn ellipse_95(cov2: Vec<Vec<f64>>) -> PyResult<(f64, f64, f64)> {
    let c = cov(cov2)?;
    if c.dim() != 2 {
        return Err(PyValueError::new_err("need a 2x2 covariance"));
    }
    let e = Ellipse::confidence_95([0.0, 0.0], &c);
    Ok((e.rx, e.ry, e.angle))
}

#[pymodule]
fn dmuq_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyReportRow>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(render_frame, m)?)?;
    m.add_function(wrap_pyfunction!(py_quad_iou, m)?)?;
    m.add_function(wrap_pyfunction!(py_combine, m)?)?;
    m.add_function(wrap_pyfunction!(py_sigma_e, m)?)?;
    m.add_function(wrap_pyfunction!(py_sigma_a, m)?)?;
    m.add_function(wrap_pyfunction!(ellipse_95, m)?)?;
    Ok(())
}
