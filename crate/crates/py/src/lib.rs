//! Python bindings. Parameter vectors cross the boundary as `list[float]` and
//! masks as `list[int]` of 0/1.

use fedcpf::config::ExperimentConfig;
use fedcpf::mask_upgrade::DeltaWindow;
use fedcpf::param::{self, BinaryMask, ParamVector};
use fedcpf::{harness, metrics, model, protocol};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: fedcpf::Error) -> PyErr {
    match e.exit_code() {
        1 => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn pv(values: Vec<f64>) -> PyResult<ParamVector> {
    ParamVector::flat(values).map_err(py_err)
}

fn mask(bits: &[u8]) -> PyResult<BinaryMask> {
    BinaryMask::from_bits(bits).map_err(py_err)
}

fn bits(m: &BinaryMask) -> Vec<u32> {
    m.as_slice().iter().map(|&b| u32::from(b)).collect()
}

#[pyfunction]
fn mask_apply(theta: Vec<f64>, eta: Vec<u8>) -> PyResult<Vec<f64>> {
    Ok(param::mask_apply(&pv(theta)?, &mask(&eta)?)
        .map_err(py_err)?
        .into_values())
}

#[pyfunction]
fn mask_not(eta: Vec<u8>) -> PyResult<Vec<u32>> {
    Ok(bits(&param::mask_not(&mask(&eta)?)))
}

#[pyfunction]
fn mask_union(a: Vec<u8>, b: Vec<u8>) -> PyResult<Vec<u32>> {
    Ok(bits(&param::mask_union(&mask(&a)?, &mask(&b)?).map_err(py_err)?))
}

#[pyfunction]
fn personalization_fraction(eta: Vec<u8>) -> PyResult<f64> {
    param::personalization_fraction(&mask(&eta)?).map_err(py_err)
}

#[pyfunction]
fn top_fraction_indices(values: Vec<f64>, p: f64, excluded: Vec<u8>) -> PyResult<Vec<u32>> {
    let selected = param::top_fraction_indices(&pv(values)?, p, &mask(&excluded)?).map_err(py_err)?;
    Ok(bits(&selected))
}

/// Returns `(u, v)`: the personalized and global parts.
#[pyfunction]
fn partition_params(theta: Vec<f64>, eta: Vec<u8>) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let (u, v) = protocol::partition_params(&pv(theta)?, &mask(&eta)?).map_err(py_err)?;
    Ok((u.into_values(), v.into_values()))
}

/// Takes `[(v_plus, eta), ...]` and returns `(theta_g, zeta, eta_g)`.
#[pyfunction]
fn aggregate_global(contributions: Vec<(Vec<f64>, Vec<u8>)>) -> PyResult<(Vec<f64>, Vec<f64>, Vec<u32>)> {
    let parsed = contributions
        .into_iter()
        .map(|(v, e)| Ok((pv(v)?, mask(&e)?)))
        .collect::<PyResult<Vec<_>>>()?;
    let agg = protocol::aggregate_global(&parsed).map_err(py_err)?;
    Ok((agg.theta_g.into_values(), agg.zeta.into_values(), bits(&agg.eta_g)))
}

#[pyfunction]
fn broadcast_reconstruct(theta_g: Vec<f64>, eta: Vec<u8>, u_plus: Vec<f64>) -> PyResult<Vec<f64>> {
    Ok(
        protocol::broadcast_reconstruct(&pv(theta_g)?, &mask(&eta)?, &pv(u_plus)?)
            .map_err(py_err)?
            .into_values(),
    )
}

/// Row-major `(phi + 1) x (phi + 1)` penalty subtracted from attention scores.
#[pyfunction]
#[pyo3(signature = (phi, lambda_suppress = 1e8))]
fn suppression_matrix(phi: usize, lambda_suppress: f64) -> PyResult<Vec<Vec<f64>>> {
    let m = model::build_suppression_matrix(phi, lambda_suppress).map_err(py_err)?;
    Ok((0..m.rows()).map(|r| m.row(r).to_vec()).collect())
}

#[pyfunction]
fn f1_score(recall: f64, precision: f64) -> f64 {
    metrics::f1_score(recall, precision)
}

/// Returns `(t, df, p)` with a two-sided p-value.
#[pyfunction]
fn welch_t_test(a: Vec<f64>, b: Vec<f64>) -> PyResult<(f64, f64, f64)> {
    let t = metrics::welch_t_test(&a, &b).map_err(py_err)?;
    Ok((t.t, t.df, t.p))
}

/// Returns `(max_rel_error, worst_segment, passed)`.
#[pyfunction]
#[pyo3(signature = (seed = 1, corrupt = false))]
fn gradcheck(seed: u64, corrupt: bool) -> PyResult<(f64, String, bool)> {
    let suite = harness::gradcheck_suite(seed, corrupt).map_err(py_err)?;
    let worst = suite.worst();
    Ok((worst.max_rel_error, worst.worst_segment.clone(), suite.passed()))
}

/// Runs the experiment a TOML config describes and returns its outputs.
#[pyfunction]
fn run_experiment<'py>(py: Python<'py>, config_toml: &str) -> PyResult<Bound<'py, PyDict>> {
    let config = ExperimentConfig::from_toml_str(config_toml).map_err(py_err)?;
    let result = py.detach(|| harness::execute(&config)).map_err(py_err)?;
    let out = PyDict::new(py);
    out.set_item("method", result.config.method.name())?;
    out.set_item("partition_digest", &result.partition_digest)?;
    out.set_item("summary_csv", harness::summary_csv(&result.records))?;
    out.set_item(
        "history_jsonl",
        harness::history_jsonl(&result.records).map_err(py_err)?,
    )?;
    out.set_item("final_accuracy", result.final_metrics.accuracy)?;
    out.set_item("final_macro_f1", result.final_metrics.macro_f1)?;
    let fractions: Vec<f64> = result
        .clients
        .iter()
        .map(|c| param::personalization_fraction(&c.eta))
        .collect::<fedcpf::Result<_>>()
        .map_err(py_err)?;
    out.set_item("personalization_fractions", fractions)?;
    Ok(out)
}

/// Windowed change accumulator.
#[pyclass(name = "DeltaWindow")]
struct PyDeltaWindow {
    inner: DeltaWindow,
}

#[pymethods]
impl PyDeltaWindow {
    #[new]
    fn new(len: usize) -> PyResult<Self> {
        Ok(Self {
            inner: DeltaWindow::new(&pv(vec![0.0; len])?),
        })
    }

    #[getter]
    fn k(&self) -> u32 {
        self.inner.k
    }

    #[getter]
    fn r_th(&self) -> usize {
        self.inner.r_th
    }

    #[getter]
    fn delta_sum(&self) -> Vec<f64> {
        self.inner.delta_sum.values().to_vec()
    }

    fn advance(&mut self, train_accuracy: f64, acc: f64, current_round: usize) -> bool {
        self.inner.advance(train_accuracy, acc, current_round)
    }

    fn accumulate(&mut self, before: Vec<f64>, after: Vec<f64>) -> PyResult<()> {
        self.inner.accumulate(&pv(before)?, &pv(after)?).map_err(py_err)
    }

    fn average(&self, current_round: usize) -> PyResult<Vec<f64>> {
        Ok(self.inner.average(current_round).map_err(py_err)?.into_values())
    }
}

#[pymodule]
fn fedcpf_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(mask_apply, m)?)?;
    m.add_function(wrap_pyfunction!(mask_not, m)?)?;
    m.add_function(wrap_pyfunction!(mask_union, m)?)?;
    m.add_function(wrap_pyfunction!(personalization_fraction, m)?)?;
    m.add_function(wrap_pyfunction!(top_fraction_indices, m)?)?;
    m.add_function(wrap_pyfunction!(partition_params, m)?)?;
    m.add_function(wrap_pyfunction!(aggregate_global, m)?)?;
    m.add_function(wrap_pyfunction!(broadcast_reconstruct, m)?)?;
    m.add_function(wrap_pyfunction!(suppression_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(f1_score, m)?)?;
    m.add_function(wrap_pyfunction!(welch_t_test, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add_class::<PyDeltaWindow>()?;
    Ok(())
}
