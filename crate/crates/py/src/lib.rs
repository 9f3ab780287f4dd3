//! Python bindings. Tensors cross the boundary as flat lists in row-major order.

use std::collections::HashMap;

use dacq_core::awq;
use dacq_core::distfit::{self, Family};
use dacq_core::evalx;
use dacq_core::grids::{self, GroupStats};
use dacq_core::quantizer::{self, Mode, QuantConfig};
use dacq_core::{synth, tensorio};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

fn err(e: dacq_core::Error) -> PyErr {
    match e {
        dacq_core::Error::Io(io) => PyIOError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn parse<T: std::str::FromStr<Err = dacq_core::Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(err)
}

#[pyclass(name = "WeightTensor", module = "dacq", skip_from_py_object)]
#[derive(Clone)]
pub struct PyWeightTensor {
    inner: tensorio::WeightTensor,
}

#[pymethods]
impl PyWeightTensor {
    #[new]
    fn new(name: String, rows: usize, cols: usize, data: Vec<f32>) -> PyResult<Self> {
        Ok(Self { inner: tensorio::WeightTensor::new(name, rows, cols, data).map_err(err)? })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: tensorio::load_tensor(path).map_err(err)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        tensorio::save_tensor(&self.inner, path).map_err(err)
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        (self.inner.rows, self.inner.cols)
    }

    #[getter]
    fn data(&self) -> Vec<f32> {
        self.inner.data.clone()
    }

    fn __repr__(&self) -> String {
        format!("WeightTensor(name={:?}, shape=({}, {}))", self.inner.name, self.inner.rows, self.inner.cols)
    }
}

#[pyclass(name = "CalibrationSet", module = "dacq", skip_from_py_object)]
#[derive(Clone)]
pub struct PyCalibrationSet {
    inner: tensorio::CalibrationSet,
}

#[pymethods]
impl PyCalibrationSet {
    #[new]
    fn new(layer_name: String, tokens: usize, cols: usize, data: Vec<f32>) -> PyResult<Self> {
        Ok(Self { inner: tensorio::CalibrationSet::new(layer_name, tokens, cols, data).map_err(err)? })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: tensorio::load_calibration(path).map_err(err)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        tensorio::save_calibration(&self.inner, path).map_err(err)
    }

    #[getter]
    fn layer_name(&self) -> String {
        self.inner.layer_name.clone()
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        (self.inner.tokens, self.inner.cols)
    }

    /// Mean absolute activation per channel.
    fn channel_stats(&self) -> PyResult<Vec<f64>> {
        Ok(awq::channel_stats(&self.inner).map_err(err)?.s_vec)
    }
}

#[pyclass(name = "QuantizedTensor", module = "dacq", skip_from_py_object)]
#[derive(Clone)]
pub struct PyQuantizedTensor {
    inner: tensorio::QuantizedTensor,
}

#[pymethods]
impl PyQuantizedTensor {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: tensorio::load_quantized(path).map_err(err)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        tensorio::save_quantized(&self.inner, path).map_err(err)
    }

    fn to_bytes(&self) -> Vec<u8> {
        tensorio::encode_quantized(&self.inner)
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        (self.inner.rows, self.inner.cols)
    }

    #[getter]
    fn bits(&self) -> u8 {
        self.inner.bits
    }

    #[getter]
    fn group_size(&self) -> usize {
        self.inner.group_size
    }

    #[getter]
    fn channel_scales(&self) -> Vec<f32> {
        self.inner.channel_scales.clone()
    }

    /// Chosen mixing coefficient per group, row-major.
    #[getter]
    fn gammas(&self) -> Vec<f32> {
        self.inner.group_params.iter().map(|g| g.gamma).collect()
    }

    fn indices(&self) -> PyResult<Vec<u8>> {
        self.inner.indices().map_err(err)
    }

    fn dequantize(&self) -> PyResult<PyWeightTensor> {
        Ok(PyWeightTensor { inner: quantizer::dequantize(&self.inner).map_err(err)? })
    }
}

#[pyclass(name = "FitReport", module = "dacq", skip_from_py_object, get_all)]
#[derive(Clone)]
pub struct PyFitReport {
    tensor_name: String,
    n_samples: usize,
    best_family: String,
    /// family -> (rmse, mae)
    metrics: HashMap<String, (f64, f64)>,
}

#[pyclass(name = "QuantResult", module = "dacq", skip_from_py_object, get_all)]
#[derive(Clone)]
pub struct PyQuantResult {
    tensor: PyQuantizedTensor,
    alpha_star: f64,
    /// `(alpha, loss)` pairs; empty without alpha search.
    alpha_losses: Vec<(f64, f64)>,
    gamma_histogram: Vec<u64>,
    /// Summed per-group search objective.
    total_error: f64,
    fallback: bool,
}

#[pyfunction]
#[pyo3(signature = (tensor, sample_n = distfit::DEFAULT_SAMPLE, probe_m = distfit::DEFAULT_PROBES, seed = 0))]
fn best_fit(tensor: &PyWeightTensor, sample_n: usize, probe_m: usize, seed: u64) -> PyResult<PyFitReport> {
    let r = distfit::best_fit(&tensor.inner, sample_n, probe_m, seed).map_err(err)?;
    Ok(PyFitReport {
        tensor_name: r.tensor_name,
        n_samples: r.n_samples,
        best_family: r.best_family.as_str().to_string(),
        metrics: r.metrics.iter().map(|m| (m.family.as_str().to_string(), (m.rmse, m.mae))).collect(),
    })
}

#[pyfunction]
fn family_quantile(family: &str, p: f64) -> PyResult<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(PyValueError::new_err(format!("p = {p} is not in (0, 1)")));
    }
    Ok(parse::<Family>(family)?.quantile(p))
}

/// Levels of one group: `mode` is uniform, logistic or hybrid (which needs `gamma`).
#[pyfunction]
#[pyo3(signature = (values, bits = 4, mode = "logistic", gamma = None))]
fn group_levels(values: Vec<f64>, bits: u8, mode: &str, gamma: Option<f64>) -> PyResult<Vec<f64>> {
    if !matches!(bits, 2 | 3 | 4 | 8) {
        return Err(PyValueError::new_err(format!("bits must be one of 2, 3, 4, 8; got {bits}")));
    }
    let stats = GroupStats::from_values(&values).map_err(err)?;
    let j = 1usize << bits;
    let grid = match parse::<Mode>(mode)? {
        Mode::Uniform => grids::uniform_levels(&stats, j),
        Mode::Logistic => grids::logistic_levels(&stats, j),
        Mode::Hybrid => {
            let g = gamma.ok_or_else(|| PyValueError::new_err("hybrid levels need gamma"))?;
            grids::hybrid_levels(&stats, j, g)
        }
    }
    .map_err(err)?;
    Ok(grid.levels)
}

#[pyfunction]
#[pyo3(signature = (tensor, calibration = None, bits = 4, group_size = 128, mode = "hybrid", alpha_search = false))]
fn quantize(
    tensor: &PyWeightTensor,
    calibration: Option<&PyCalibrationSet>,
    bits: u8,
    group_size: usize,
    mode: &str,
    alpha_search: bool,
) -> PyResult<PyQuantResult> {
    let cfg = QuantConfig { bits, group_size, mode: parse(mode)? };
    let cal = calibration.map(|c| &c.inner);
    let (outcome, alpha_star, alpha_losses) = match (cal, alpha_search) {
        (Some(c), true) => {
            let res = awq::alpha_search(&tensor.inner, c, &awq::channel_stats(c).map_err(err)?, &cfg).map_err(err)?;
            (res.best, res.alpha_star, res.losses)
        }
        (None, true) => return Err(PyValueError::new_err("alpha search needs calibration activations")),
        _ => (quantizer::quantize_tensor(&tensor.inner, cal, &cfg).map_err(err)?, 0.0, Vec::new()),
    };
    Ok(PyQuantResult {
        gamma_histogram: outcome.gamma_histogram().to_vec(),
        total_error: outcome.total_error(),
        fallback: outcome.objective == quantizer::Objective::WeightMse,
        tensor: PyQuantizedTensor { inner: outcome.tensor },
        alpha_star,
        alpha_losses,
    })
}

#[pyfunction]
fn dequantize(qt: &PyQuantizedTensor) -> PyResult<PyWeightTensor> {
    qt.dequantize()
}

#[pyfunction]
fn reconstruction_metrics(orig: &PyWeightTensor, recon: &PyWeightTensor) -> PyResult<(f64, f64)> {
    evalx::reconstruction_metrics(&orig.inner, &recon.inner).map_err(err)
}

#[pyfunction]
fn output_error(orig: &PyWeightTensor, recon: &PyWeightTensor, calibration: &PyCalibrationSet) -> PyResult<f64> {
    awq::output_error(&orig.inner, &recon.inner, &calibration.inner).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (family, rows, cols, scale = 1.0, seed = 0))]
fn synthetic_tensor(family: &str, rows: usize, cols: usize, scale: f64, seed: u64) -> PyResult<PyWeightTensor> {
    let t = if family == "mixture" {
        synth::logistic_mixture_tensor(family, rows, cols, scale, seed)
    } else {
        synth::family_tensor(family, parse(family)?, rows, cols, scale, seed)
    };
    Ok(PyWeightTensor { inner: t.map_err(err)? })
}

#[pyfunction]
#[pyo3(signature = (layer_name, tokens, cols, salient = Vec::new(), factor = 100.0, seed = 0))]
fn synthetic_calibration(
    layer_name: &str,
    tokens: usize,
    cols: usize,
    salient: Vec<usize>,
    factor: f64,
    seed: u64,
) -> PyResult<PyCalibrationSet> {
    let c = synth::gaussian_calibration(layer_name, tokens, cols, &salient, factor, seed).map_err(err)?;
    Ok(PyCalibrationSet { inner: c })
}

#[pymodule]
fn dacq(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyWeightTensor>()?;
    m.add_class::<PyCalibrationSet>()?;
    m.add_class::<PyQuantizedTensor>()?;
    m.add_class::<PyFitReport>()?;
    m.add_class::<PyQuantResult>()?;
    m.add_function(wrap_pyfunction!(best_fit, m)?)?;
    m.add_function(wrap_pyfunction!(family_quantile, m)?)?;
    m.add_function(wrap_pyfunction!(group_levels, m)?)?;
    m.add_function(wrap_pyfunction!(quantize, m)?)?;
    m.add_function(wrap_pyfunction!(dequantize, m)?)?;
    m.add_function(wrap_pyfunction!(reconstruction_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(output_error, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_tensor, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_calibration, m)?)?;
    Ok(())
}
