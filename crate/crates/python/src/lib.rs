//! Python bindings for the `tcmf` crate, built as the `tcmf_py` extension module.
//!
//! Matrices cross the boundary as 2-D float64 numpy arrays.

use numpy::ndarray::Array2;
use numpy::{IntoPyArray, PyArray1, PyArray2, PyReadonlyArray2};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use tcmf::altmin::EpochTrace;
use tcmf::thresholding::initial_lambda;
use tcmf::{
    Backend, HmfParams, LambdaMode, LambdaSchedule, Matrix, ObservationSet, PerpcaParams,
    SynthConfig, TcmfConfig, WarmStartPolicy,
};

create_exception!(tcmf_py, TcmfError, PyException);

fn err(e: tcmf::TcmfError) -> PyErr {
    TcmfError::new_err(e.to_string())
}

fn to_matrix(a: &PyReadonlyArray2<'_, f64>) -> Matrix {
    let view = a.as_array();
    let (r, c) = view.dim();
    Matrix::from_fn(r, c, |i, j| view[[i, j]])
}

fn to_numpy<'py>(py: Python<'py>, m: &Matrix) -> Bound<'py, PyArray2<f64>> {
    Array2::from_shape_fn(m.shape(), |(i, j)| m[(i, j)]).into_pyarray(py)
}

fn to_numpy_list<'py>(py: Python<'py>, ms: &[Matrix]) -> Vec<Bound<'py, PyArray2<f64>>> {
    ms.iter().map(|m| to_numpy(py, m)).collect()
}

/// Synthetic ground truth: shared factor, per-source factors and sparse noise.
#[pyclass(name = "GroundTruth", module = "tcmf_py", frozen)]
struct PyGroundTruth {
    inner: tcmf::GroundTruth,
}

#[pymethods]
impl PyGroundTruth {
    #[getter]
    fn n_sources(&self) -> usize {
        self.inner.n_sources()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn u_g<'py>(&self, py: Python<'py>) -> Bound<'py, PyArray2<f64>> {
        to_numpy(py, &self.inner.u_g)
    }

    #[getter]
    fn v_g<'py>(&self, py: Python<'py>) -> Vec<Bound<'py, PyArray2<f64>>> {
        to_numpy_list(py, &self.inner.v_g)
    }

    #[getter]
    fn u_l<'py>(&self, py: Python<'py>) -> Vec<Bound<'py, PyArray2<f64>>> {
        to_numpy_list(py, &self.inner.u_l)
    }

    #[getter]
    fn v_l<'py>(&self, py: Python<'py>) -> Vec<Bound<'py, PyArray2<f64>>> {
        to_numpy_list(py, &self.inner.v_l)
    }

    #[getter]
    fn s<'py>(&self, py: Python<'py>) -> Vec<Bound<'py, PyArray2<f64>>> {
        to_numpy_list(py, &self.inner.s)
    }

    /// The observed matrices `M_i`.
    fn observations<'py>(&self, py: Python<'py>) -> Vec<Bound<'py, PyArray2<f64>>> {
        let obs = tcmf::model::assemble_observations(&self.inner);
        to_numpy_list(py, &obs.matrices)
    }

    fn low_rank<'py>(&self, py: Python<'py>, i: usize) -> PyResult<Bound<'py, PyArray2<f64>>> {
        if i >= self.inner.n_sources() {
            return Err(pyo3::exceptions::PyIndexError::new_err(
                "source index out of range",
            ));
        }
        Ok(to_numpy(py, &self.inner.low_rank(i)))
    }

    fn __repr__(&self) -> String {
        format!(
            "GroundTruth(n_sources={}, shape=({}, ..), r1={}, r2={}, seed={})",
            self.inner.n_sources(),
            self.inner.u_g.nrows(),
            self.inner.r1(),
            self.inner.r2(),
            self.inner.seed
        )
    }
}

#[pyfunction]
#[pyo3(signature = (n_sources, n1, n2, r1, r2, noise_prob, noise_magnitude, seed))]
#[allow(clippy::too_many_arguments)]
fn generate(
    n_sources: usize,
    n1: usize,
    n2: usize,
    r1: usize,
    r2: usize,
    noise_prob: f64,
    noise_magnitude: f64,
    seed: u64,
) -> PyResult<PyGroundTruth> {
    let cfg = SynthConfig {
        n_sources,
        n1,
        n2,
        r1,
        r2,
        noise_prob,
        noise_magnitude,
        seed,
    };
    let inner = tcmf::model::generate(&cfg).map_err(err)?;
    Ok(PyGroundTruth { inner })
}

#[pyfunction]
fn identifiability_report<'py>(
    py: Python<'py>,
    gt: &PyGroundTruth,
) -> PyResult<Bound<'py, PyDict>> {
    let rep = tcmf::model::identifiability_report(&gt.inner).map_err(err)?;
    let r = gt.inner.r1() + gt.inner.r2();
    let d = PyDict::new(py);
    d.set_item("alpha", rep.alpha)?;
    d.set_item("mu", rep.mu)?;
    d.set_item("theta", rep.theta)?;
    d.set_item("sigma_max", rep.sigma_max)?;
    d.set_item("sigma_min", rep.sigma_min)?;
    d.set_item(
        "budget_ratio",
        rep.sparsity_budget_ratio(r, gt.inner.n_sources()),
    )?;
    Ok(d)
}

fn trace_row<'py>(py: Python<'py>, t: &EpochTrace) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("epoch", t.epoch)?;
    d.set_item("lambda", t.lambda)?;
    d.set_item("linf_g", t.linf_g)?;
    d.set_item("linf_l", t.linf_l)?;
    d.set_item("linf_s", t.linf_s)?;
    d.set_item("log_g", t.log_g)?;
    d.set_item("log_l", t.log_l)?;
    d.set_item("log_s", t.log_s)?;
    d.set_item("support_violations", t.support_violations)?;
    d.set_item("wall_ms", t.wall_ms)?;
    Ok(d)
}

/// Runs the alternating solver. Without an explicit `lambda_1` the start value
/// follows `lambda1_mode`: `"data_driven"` uses `max_i ‖M_i‖∞`, `"theoretical"`
/// needs `ground_truth`. Returns a dict with `u_g`, `v_g`, `u_l`, `v_l`, `s`, `low_rank` and `trace`.
#[pyfunction]
#[pyo3(signature = (
    matrices, r1, r2, *, lambda_1=None, lambda1_mode="data_driven", rho=0.9, epsilon=1e-3, epochs=20, backend="hmf",
    step_size=None, iterations=None, beta=1e-5, warm_start="carry_forward", ground_truth=None
))]
#[allow(clippy::too_many_arguments)]
fn run<'py>(
    py: Python<'py>,
    matrices: Vec<PyReadonlyArray2<'py, f64>>,
    r1: usize,
    r2: usize,
    lambda_1: Option<f64>,
    lambda1_mode: &str,
    rho: f64,
    epsilon: f64,
    epochs: usize,
    backend: &str,
    step_size: Option<f64>,
    iterations: Option<usize>,
    beta: f64,
    warm_start: &str,
    ground_truth: Option<PyRef<'py, PyGroundTruth>>,
) -> PyResult<Bound<'py, PyDict>> {
    let obs = ObservationSet::new(matrices.iter().map(to_matrix).collect(), r1, r2).map_err(err)?;
    let backend = match backend {
        "hmf" => {
            let d = HmfParams::default();
            Backend::Hmf(HmfParams {
                step_size: step_size.unwrap_or(d.step_size),
                iterations: iterations.unwrap_or(d.iterations),
                beta,
                ..d
            })
        }
        "perpca" => {
            let d = PerpcaParams::default();
            Backend::PerPca(PerpcaParams {
                step_size: step_size.unwrap_or(d.step_size),
                iterations: iterations.unwrap_or(d.iterations),
                ..d
            })
        }
        other => {
            return Err(pyo3::exceptions::PyValueError::new_err(format!(
                "unknown backend {other:?}"
            )))
        }
    };
    let warm_start = match warm_start {
        "carry_forward" => WarmStartPolicy::CarryForward,
        "fresh_spectral" => WarmStartPolicy::FreshSpectral,
        other => {
            return Err(pyo3::exceptions::PyValueError::new_err(format!(
                "unknown warm_start {other:?}"
            )))
        }
    };
    let mode = match lambda1_mode {
        "data_driven" => LambdaMode::DataDriven,
        "theoretical" => LambdaMode::Theoretical,
        other => {
            return Err(pyo3::exceptions::PyValueError::new_err(format!(
                "unknown lambda1_mode {other:?}"
            )))
        }
    };
    let report = match &ground_truth {
        Some(g) if mode == LambdaMode::Theoretical && lambda_1.is_none() => {
            Some(tcmf::model::identifiability_report(&g.inner).map_err(err)?)
        }
        _ => None,
    };
    let lambda_1 = match lambda_1 {
        Some(l) => l,
        None => initial_lambda(&obs, mode, report.as_ref()).map_err(err)?,
    };
    let cfg = TcmfConfig {
        schedule: LambdaSchedule::new(lambda_1, rho, epsilon).map_err(err)?,
        epochs,
        backend,
        warm_start,
    };
    let gt = ground_truth.as_ref().map(|g| g.inner.clone());
    let out = py
        .detach(|| tcmf::run(&obs, &cfg, gt.as_ref()))
        .map_err(err)?;

    let d = PyDict::new(py);
    d.set_item("u_g", to_numpy(py, &out.factors.u_g))?;
    d.set_item("v_g", to_numpy_list(py, &out.factors.v_g))?;
    d.set_item("u_l", to_numpy_list(py, &out.factors.u_l))?;
    d.set_item("v_l", to_numpy_list(py, &out.factors.v_l))?;
    d.set_item("s", to_numpy_list(py, &out.sparse.s))?;
    d.set_item(
        "low_rank",
        to_numpy_list(py, &out.factors.reconstructions()),
    )?;
    let rows = out
        .trace
        .iter()
        .map(|t| trace_row(py, t))
        .collect::<PyResult<Vec<_>>>()?;
    d.set_item("trace", rows)?;
    Ok(d)
}

/// Keeps entries with `|x| > lam` and zeroes the rest.
#[pyfunction]
fn hard_threshold<'py>(
    py: Python<'py>,
    x: PyReadonlyArray2<'py, f64>,
    lam: f64,
) -> Bound<'py, PyArray2<f64>> {
    to_numpy(py, &tcmf::thresholding::hard_threshold(&to_matrix(&x), lam))
}

/// Top-`k` singular triplets as `(u, sigma, v)`.
#[pyfunction]
#[allow(clippy::type_complexity)]
fn truncated_svd<'py>(
    py: Python<'py>,
    x: PyReadonlyArray2<'py, f64>,
    k: usize,
) -> PyResult<(
    Bound<'py, PyArray2<f64>>,
    Bound<'py, PyArray1<f64>>,
    Bound<'py, PyArray2<f64>>,
)> {
    let svd = tcmf::numerics::truncated_svd(&to_matrix(&x), k).map_err(err)?;
    Ok((
        to_numpy(py, &svd.u),
        PyArray1::from_vec(py, svd.sigma),
        to_numpy(py, &svd.v),
    ))
}

#[pyfunction]
fn measure_misalignment(u_l: Vec<PyReadonlyArray2<'_, f64>>) -> PyResult<f64> {
    let ms: Vec<Matrix> = u_l.iter().map(to_matrix).collect();
    tcmf::model::measure_misalignment(&ms).map_err(err)
}

#[pyfunction]
fn psnr(
    reference: PyReadonlyArray2<'_, f64>,
    candidate: PyReadonlyArray2<'_, f64>,
    peak: f64,
) -> PyResult<f64> {
    tcmf::metrics::psnr(&to_matrix(&reference), &to_matrix(&candidate), peak).map_err(err)
}

#[pyfunction]
fn anomaly_statistic(s: PyReadonlyArray2<'_, f64>) -> f64 {
    tcmf::metrics::anomaly_statistic(&to_matrix(&s))
}

#[pymodule]
fn tcmf_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("TcmfError", m.py().get_type::<TcmfError>())?;
    m.add_class::<PyGroundTruth>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(identifiability_report, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(hard_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(truncated_svd, m)?)?;
    m.add_function(wrap_pyfunction!(measure_misalignment, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(anomaly_statistic, m)?)?;
    Ok(())
}
