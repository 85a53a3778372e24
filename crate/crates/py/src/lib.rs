//! Python bindings for the `coreg` co-registration engine.
//!
//! Pullbacks, configurations and results are exposed as classes; the lower
//! level dynamic programs and agreement statistics as plain functions over
//! lists of floats.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use coreg::circumferential::{rotation_path as core_rotation_path, PathParams};
use coreg::dtw::{backtrace, dtw_cost, Grid};
use coreg::metrics;
use coreg::oracle;
use coreg::pullback::{self, PullbackError};
use coreg::synth::{self, SynthConfig};

fn value_error(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_modality(name: &str) -> PyResult<coreg::Modality> {
    match name.to_ascii_lowercase().as_str() {
        "ivus" => Ok(coreg::Modality::Ivus),
        "oct" => Ok(coreg::Modality::Oct),
        other => Err(PyValueError::new_err(format!("modality must be 'ivus' or 'oct', got {other:?}"))),
    }
}

fn pullback_error(e: PullbackError) -> PyErr {
    match e {
        PullbackError::Io { .. } => PyIOError::new_err(e.to_string()),
        other => value_error(other),
    }
}

fn grid(rows: Vec<Vec<f64>>) -> PyResult<Grid> {
    let width = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || width == 0 || rows.iter().any(|r| r.len() != width) {
        return Err(PyValueError::new_err("expected a non-empty rectangular matrix"));
    }
    Ok(Grid::from_rows(&rows))
}

fn to_rows(g: &Grid) -> Vec<Vec<f64>> {
    (0..g.rows()).map(|i| g.row(i).to_vec()).collect()
}

/// One IVUS or OCT pullback of per-frame features.
#[pyclass(name = "Pullback", module = "coreg_py", skip_from_py_object)]
#[derive(Clone)]
struct PyPullback {
    inner: coreg::Pullback,
}

#[pymethods]
impl PyPullback {
    /// Parses NDJSON text, one frame record per line.
    #[staticmethod]
    fn from_ndjson(text: &str, modality: &str) -> PyResult<Self> {
        let inner = pullback::parse_pullback_str(text, parse_modality(modality)?).map_err(pullback_error)?;
        Ok(PyPullback { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf, modality: &str) -> PyResult<Self> {
        let inner = pullback::parse_pullback(path, parse_modality(modality)?).map_err(pullback_error)?;
        Ok(PyPullback { inner })
    }

    fn to_ndjson(&self) -> String {
        pullback::serialize_pullback(&self.inner)
    }

    #[getter]
    fn modality(&self) -> String {
        self.inner.modality.to_string().to_ascii_lowercase()
    }

    #[getter]
    fn frame_spacing_mm(&self) -> f64 {
        self.inner.frame_spacing_mm
    }

    #[getter]
    fn ed_count(&self) -> usize {
        self.inner.ed_count()
    }

    #[getter]
    fn positions_mm(&self) -> Vec<f64> {
        self.inner.frames.iter().map(|f| f.position_mm).collect()
    }

    #[getter]
    fn lumen_areas_mm2(&self) -> Vec<f64> {
        self.inner.frames.iter().map(|f| f.lumen_area_mm2).collect()
    }

    /// Human-readable invariant violations; empty for a valid pullback.
    fn validate(&self) -> Vec<String> {
        pullback::validate(&self.inner).iter().map(|v| v.to_string()).collect()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Pullback(modality={}, frames={}, ed_frames={})",
            self.inner.modality,
            self.inner.len(),
            self.inner.ed_count()
        )
    }
}

/// Registration settings; construct from JSON or take the defaults.
#[pyclass(name = "EngineConfig", module = "coreg_py", skip_from_py_object)]
#[derive(Clone)]
struct PyEngineConfig {
    inner: coreg::EngineConfig,
}

#[pymethods]
impl PyEngineConfig {
    #[new]
    #[pyo3(signature = (json = None))]
    fn new(json: Option<&str>) -> PyResult<Self> {
        let inner = match json {
            Some(text) => coreg::EngineConfig::from_json(text).map_err(value_error)?,
            None => coreg::EngineConfig::default(),
        };
        Ok(PyEngineConfig { inner })
    }

    fn to_json(&self) -> String {
        serde_json::to_string(&self.inner).expect("config serializes")
    }

    #[getter]
    fn long_weights(&self) -> [f64; 4] {
        self.inner.long_weights.as_array()
    }

    #[getter]
    fn circ_weights(&self) -> [f64; 3] {
        self.inner.circ_weights.into()
    }

    #[getter]
    fn sigma(&self) -> f64 {
        self.inner.sigma
    }

    #[getter]
    fn get_lambda(&self) -> f64 {
        self.inner.lambda
    }

    #[getter]
    fn delta_max_deg_per_mm(&self) -> f64 {
        self.inner.delta_max_deg_per_mm
    }

    fn __repr__(&self) -> String {
        format!("EngineConfig({})", self.to_json())
    }
}

/// Output of [`register`].
#[pyclass(name = "RegistrationResult", module = "coreg_py")]
struct PyRegistrationResult {
    inner: coreg::RegistrationResult,
    elapsed_ms: f64,
}

#[pymethods]
impl PyRegistrationResult {
    #[getter]
    fn ivus_frames(&self) -> Vec<usize> {
        self.inner.ivus_frames.clone()
    }

    #[getter]
    fn full_mapping(&self) -> Vec<f64> {
        self.inner.full_mapping.clone()
    }

    #[getter]
    fn per_frame_rotation(&self) -> Vec<f64> {
        self.inner.per_frame_rotation.clone()
    }

    /// `(ivus_frame, oct_frame, rotation_deg)` per anchor pair.
    #[getter]
    fn anchors(&self) -> Vec<(usize, usize, f64)> {
        self.inner
            .anchors
            .iter()
            .map(|a| (a.pair.ivus_frame, a.pair.oct_frame, a.rotation_deg))
            .collect()
    }

    #[getter]
    fn path(&self) -> Vec<(usize, usize)> {
        self.inner.path.clone()
    }

    #[getter]
    fn warnings(&self) -> Vec<String> {
        self.inner.warnings.clone()
    }

    #[getter]
    fn elapsed_ms(&self) -> f64 {
        self.elapsed_ms
    }

    fn is_degenerate(&self) -> bool {
        self.inner.is_degenerate()
    }

    /// The same JSON document `coreg register` writes.
    fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.inner).expect("result serializes")
    }
}

/// Signed-rank test outcome.
#[pyclass(name = "WilcoxonResult", module = "coreg_py", get_all)]
struct PyWilcoxon {
    w_plus: f64,
    n: usize,
    p_value: f64,
    method: String,
    all_zero: bool,
}

/// Williams index with its bootstrap interval; `index` is None when a mean disagreement is zero.
#[pyclass(name = "WilliamsIndex", module = "coreg_py", get_all)]
struct PyWilliams {
    index: Option<f64>,
    ci_low: Option<f64>,
    ci_high: Option<f64>,
    zero_disagreement: bool,
    resamples_used: usize,
}

#[pyfunction]
#[pyo3(signature = (ivus, oct, config = None))]
fn register(
    py: Python<'_>,
    ivus: &PyPullback,
    oct: &PyPullback,
    config: Option<&PyEngineConfig>,
) -> PyResult<PyRegistrationResult> {
    let cfg = config.map(|c| c.inner.clone()).unwrap_or_default();
    let (a, b) = (ivus.inner.clone(), oct.inner.clone());
    let reg = py.detach(move || coreg::register(&a, &b, &cfg)).map_err(value_error)?;
    Ok(PyRegistrationResult {
        inner: reg.result,
        elapsed_ms: reg.elapsed_ms,
    })
}

/// Synthetic vessel description (JSON) with random landmarks, warp and rotation.
#[pyfunction]
#[pyo3(signature = (seed, length_mm = 50.0))]
fn random_vessel_config(seed: u64, length_mm: f64) -> String {
    serde_json::to_string_pretty(&SynthConfig::random_vessel(seed, length_mm)).expect("config serializes")
}

/// Renders a synthetic pair; returns `(ivus, oct, true_mapping, true_rotation)`.
#[pyfunction]
#[pyo3(signature = (config_json = None, seed = None))]
fn simulate(
    config_json: Option<&str>,
    seed: Option<u64>,
) -> PyResult<(PyPullback, PyPullback, Vec<f64>, Vec<f64>)> {
    let mut cfg: SynthConfig = match config_json {
        Some(text) => serde_json::from_str(text).map_err(value_error)?,
        None => SynthConfig::default(),
    };
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    let (ivus, oct, truth) = synth::generate_pair(&cfg).map_err(value_error)?;
    Ok((
        PyPullback { inner: ivus },
        PyPullback { inner: oct },
        truth.true_mapping,
        truth.true_rotation,
    ))
}

/// Cumulative cost matrix and warp path for a distance matrix.
#[pyfunction]
fn dtw(distance: Vec<Vec<f64>>) -> PyResult<(Vec<Vec<f64>>, Vec<(usize, usize)>)> {
    let d = grid(distance)?;
    let c = dtw_cost(&d);
    let path = backtrace(&c, &d);
    Ok((to_rows(&c), path))
}

/// Exhaustive minimum-cost path (at most 8x8).
#[pyfunction]
fn brute_force_dtw(distance: Vec<Vec<f64>>) -> PyResult<(f64, Vec<(usize, usize)>)> {
    oracle::brute_force_dtw(&grid(distance)?).map_err(value_error)
}

/// Regularized rotation bin per row of a rotation cost matrix.
#[pyfunction]
#[pyo3(signature = (cost, positions_mm, lambda_ = coreg::config::DEFAULT_LAMBDA, delta_max_deg_per_mm = 30.0))]
fn rotation_path(
    cost: Vec<Vec<f64>>,
    positions_mm: Vec<f64>,
    lambda_: f64,
    delta_max_deg_per_mm: f64,
) -> PyResult<Vec<usize>> {
    let r = grid(cost)?;
    if positions_mm.len() != r.rows() {
        return Err(PyValueError::new_err("one position per row is required"));
    }
    Ok(core_rotation_path(
        &r,
        PathParams {
            lambda: lambda_,
            delta_max_deg_per_mm,
        },
        &positions_mm,
    ))
}

#[pyfunction]
fn frame_differences(a: Vec<f64>, b: Vec<f64>) -> PyResult<Vec<f64>> {
    metrics::frame_differences(&a, &b).map_err(value_error)
}

#[pyfunction]
fn angle_differences(a: Vec<f64>, b: Vec<f64>) -> PyResult<Vec<f64>> {
    metrics::angle_differences(&a, &b).map_err(value_error)
}

#[pyfunction]
fn ccc(x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    metrics::ccc(&x, &y).map_err(value_error)
}

#[pyfunction]
fn spearman(x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    metrics::spearman(&x, &y).map_err(value_error)
}

/// `(median, iqr)`.
#[pyfunction]
fn summarize(values: Vec<f64>) -> PyResult<(f64, f64)> {
    metrics::summarize(&values).map_err(value_error)
}

#[pyfunction]
fn wilcoxon(d1: Vec<f64>, d2: Vec<f64>) -> PyResult<PyWilcoxon> {
    let r = metrics::wilcoxon_signed_rank(&d1, &d2).map_err(value_error)?;
    Ok(PyWilcoxon {
        w_plus: r.w_plus,
        n: r.n,
        p_value: r.p_value,
        method: match r.method {
            metrics::WilcoxonMethod::Exact => "exact".into(),
            metrics::WilcoxonMethod::Normal => "normal".into(),
        },
        all_zero: r.all_zero,
    })
}

#[pyfunction]
#[pyo3(signature = (d_model_a1, d_model_a2, d_a1_a2, resamples = 2000, seed = 0, median = false))]
fn williams_index(
    d_model_a1: Vec<f64>,
    d_model_a2: Vec<f64>,
    d_a1_a2: Vec<f64>,
    resamples: usize,
    seed: u64,
    median: bool,
) -> PyResult<PyWilliams> {
    let cfg = metrics::WilliamsConfig {
        disagreement: if median {
            metrics::Disagreement::Median
        } else {
            metrics::Disagreement::Mean
        },
        resamples,
        seed,
    };
    let w = metrics::williams_index(&d_model_a1, &d_model_a2, &d_a1_a2, &cfg).map_err(value_error)?;
    Ok(PyWilliams {
        index: w.index,
        ci_low: w.ci_low,
        ci_high: w.ci_high,
        zero_disagreement: w.zero_disagreement,
        resamples_used: w.resamples_used,
    })
}

#[pymodule]
fn coreg_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPullback>()?;
    m.add_class::<PyEngineConfig>()?;
    m.add_class::<PyRegistrationResult>()?;
    m.add_class::<PyWilcoxon>()?;
    m.add_class::<PyWilliams>()?;
    m.add_function(wrap_pyfunction!(register, m)?)?;
    m.add_function(wrap_pyfunction!(random_vessel_config, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(dtw, m)?)?;
    m.add_function(wrap_pyfunction!(brute_force_dtw, m)?)?;
    m.add_function(wrap_pyfunction!(rotation_path, m)?)?;
    m.add_function(wrap_pyfunction!(frame_differences, m)?)?;
    m.add_function(wrap_pyfunction!(angle_differences, m)?)?;
    m.add_function(wrap_pyfunction!(ccc, m)?)?;
    m.add_function(wrap_pyfunction!(spearman, m)?)?;
    m.add_function(wrap_pyfunction!(summarize, m)?)?;
    m.add_function(wrap_pyfunction!(wilcoxon, m)?)?;
    m.add_function(wrap_pyfunction!(williams_index, m)?)?;
    m.add("N_BINS", coreg::pullback::N_BINS)?;
    Ok(())
}
