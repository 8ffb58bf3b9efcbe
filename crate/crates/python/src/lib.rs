use std::path::PathBuf;

use ionprep::budget::{self, BudgetInputs};
use ionprep::config::RunConfig;
use ionprep::schemes::{self, FieldRegime, SchemeResult, Setup};
use ionprep::species::SpeciesData;
use ionprep::structure::{clock_field, dressed_states, ClockPoint, FieldConfig, StateLabel};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: ionprep::Error) -> PyErr {
    match e {
        ionprep::Error::Config(_) | ionprep::Error::UnknownState(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for ionprep::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

/// Atomic data of one ion species.
#[pyclass(name = "Species", module = "ionprep_py", frozen)]
struct PySpecies(SpeciesData);

#[pymethods]
impl PySpecies {
    /// Built-in data for "Ca43", "Mg25" or "Ba137".
    #[staticmethod]
    fn builtin(name: &str) -> PyResult<Self> {
        SpeciesData::builtin(name).py().map(PySpecies)
    }

    #[staticmethod]
    fn from_file(path: PathBuf) -> PyResult<Self> {
        SpeciesData::from_file(&path).py().map(PySpecies)
    }

    #[staticmethod]
    fn builtin_names() -> Vec<&'static str> {
        SpeciesData::builtin_names().collect()
    }

    #[getter]
    fn name(&self) -> &str {
        &self.0.name
    }

    #[getter]
    fn levels(&self) -> Vec<String> {
        self.0.levels.iter().map(|l| l.name.clone()).collect()
    }

    #[getter]
    fn ground_hyperfine_splitting_hz(&self) -> f64 {
        self.0.ground_hyperfine_splitting_hz()
    }

    /// (F, M, energy_hz) of every dressed state of `level` at `field_mt`.
    fn dressed_states(&self, level: &str, field_mt: f64) -> PyResult<Vec<(f64, f64, f64)>> {
        let spec = self.0.level(level).ok_or_else(|| PyValueError::new_err(format!("no level {level}")))?;
        let field = FieldConfig::from_millitesla(field_mt).py()?;
        let states = dressed_states(spec, &self.0, &field).py()?;
        Ok(states.iter().map(|s| (s.label.f.value(), s.label.m.value(), s.frequency_hz())).collect())
    }

    /// (field_mt, frequency_hz) of the ground-level clock point between two
    /// "F,M" states, or None.
    #[pyo3(signature = (lower, upper, max_field_mt = 200.0))]
    fn clock_point(&self, lower: &str, upper: &str, max_field_mt: f64) -> PyResult<Option<(f64, f64)>> {
        let level = self.0.level(&self.0.ground_level).expect("ground level exists");
        let (l, u) = (StateLabel::parse(lower).py()?, StateLabel::parse(upper).py()?);
        match clock_field(level, &self.0, l, u, (1e-5, max_field_mt * 1e-3)).py()? {
            ClockPoint::Found { field_tesla, frequency_hz } => Ok(Some((field_tesla * 1e3, frequency_hz.abs()))),
            ClockPoint::NoClockPoint => Ok(None),
        }
    }

    fn __repr__(&self) -> String {
        format!("Species('{}')", self.0.name)
    }
}

/// Run configuration; defaults to the bundled 43Ca+ FSSP setup.
#[pyclass(name = "RunConfig", module = "ionprep_py")]
struct PyRunConfig(RunConfig);

#[pymethods]
impl PyRunConfig {
    #[new]
    fn new() -> Self {
        PyRunConfig(RunConfig::default_ca43())
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        RunConfig::from_toml_str(text).py().map(PyRunConfig)
    }

    #[staticmethod]
    fn from_file(path: PathBuf) -> PyResult<Self> {
        RunConfig::from_file(&path).py().map(PyRunConfig)
    }

    fn to_toml(&self) -> String {
        self.0.to_toml_string()
    }

    #[getter]
    fn species(&self) -> &str {
        &self.0.species
    }

    #[getter]
    fn get_target(&self) -> Option<String> {
        self.0.target.clone()
    }

    #[setter]
    fn set_target(&mut self, target: Option<String>) {
        self.0.target = target;
    }

    #[getter]
    fn get_initial(&self) -> String {
        self.0.initial.clone()
    }

    #[setter]
    fn set_initial(&mut self, initial: String) {
        self.0.initial = initial;
    }

    #[getter]
    fn get_field_mt(&self) -> Option<f64> {
        self.0.field_mt
    }

    #[setter]
    fn set_field_mt(&mut self, b: Option<f64>) {
        self.0.field_mt = b;
    }

    #[getter]
    fn get_pump_intensity(&self) -> f64 {
        self.0.pump.intensity
    }

    #[setter]
    fn set_pump_intensity(&mut self, s: f64) {
        self.0.pump.intensity = s;
    }

    #[getter]
    fn get_pump_angle_deg(&self) -> Option<f64> {
        self.0.pump.angle_deg
    }

    #[setter]
    fn set_pump_angle_deg(&mut self, deg: Option<f64>) {
        self.0.pump.angle_deg = deg;
    }

    #[getter]
    fn get_epsilon(&self) -> f64 {
        self.0.pssp.epsilon
    }

    #[setter]
    fn set_epsilon(&mut self, eps: f64) {
        self.0.pssp.epsilon = eps;
    }

    fn __repr__(&self) -> String {
        format!("RunConfig(species='{}', target={:?})", self.0.species, self.0.target)
    }
}

/// Error trace and summary of one scheme run.
#[pyclass(name = "SchemeResult", module = "ionprep_py", frozen)]
struct PySchemeResult(SchemeResult);

#[pymethods]
impl PySchemeResult {
    #[getter]
    fn steady_error(&self) -> f64 {
        self.0.steady_error
    }

    #[getter]
    fn cycles(&self) -> usize {
        self.0.cycles
    }

    /// Elapsed experiment time in seconds.
    #[getter]
    fn duration(&self) -> f64 {
        self.0.duration
    }

    #[getter]
    fn converged(&self) -> bool {
        self.0.converged
    }

    #[getter]
    fn errors(&self) -> Vec<f64> {
        self.0.trace.errors.clone()
    }

    #[getter]
    fn times(&self) -> Vec<f64> {
        self.0.trace.times.clone()
    }

    fn __repr__(&self) -> String {
        format!(
            "SchemeResult(steady_error={:.4e}, cycles={}, converged={})",
            self.0.steady_error, self.0.cycles, self.0.converged
        )
    }
}

fn load(config: &RunConfig, species: Option<&PySpecies>) -> PyResult<SpeciesData> {
    match species {
        Some(s) => Ok(s.0.clone()),
        None => SpeciesData::builtin(&config.species).py(),
    }
}

fn setup(config: &PyRunConfig, species: Option<&PySpecies>) -> PyResult<Setup> {
    Setup::new(&config.0, &load(&config.0, species)?).py()
}

/// Pulsed FSSP run to convergence from the configured initial state.
#[pyfunction]
#[pyo3(signature = (config, species = None))]
fn run_fssp(py: Python<'_>, config: &PyRunConfig, species: Option<&PySpecies>) -> PyResult<PySchemeResult> {
    let s = setup(config, species)?;
    py.detach(|| {
        let scheme = s.fssp_scheme()?;
        schemes::run_to_convergence(&scheme, &s.initial()?, s.convergence())
    })
    .py()
    .map(PySchemeResult)
}

/// Error of the exact per-cycle fixed point of the FSSP cycle.
#[pyfunction]
#[pyo3(signature = (config, species = None))]
fn fixed_point_error(config: &PyRunConfig, species: Option<&PySpecies>) -> PyResult<f64> {
    let scheme = setup(config, species)?.fssp_scheme().py()?;
    let p = scheme.fixed_point().py()?;
    Ok(scheme.error(&p))
}

/// [("F,M", cycles to reach 1/e or None)] for every ground state.
#[pyfunction]
#[pyo3(signature = (config, species = None))]
fn prepare_from_all_states(
    py: Python<'_>,
    config: &PyRunConfig,
    species: Option<&PySpecies>,
) -> PyResult<Vec<(String, Option<usize>)>> {
    let s = setup(config, species)?;
    let rows = py.detach(|| schemes::prepare_from_all_states(&s)).py()?;
    Ok(rows.into_iter().map(|(l, n)| (l.to_string(), n)).collect())
}

#[pyfunction]
#[pyo3(signature = (config, epsilon = None, species = None))]
fn run_pssp(
    py: Python<'_>,
    config: &PyRunConfig,
    epsilon: Option<f64>,
    species: Option<&PySpecies>,
) -> PyResult<PySchemeResult> {
    let s = setup(config, species)?;
    let eps = epsilon.unwrap_or(config.0.pssp.epsilon);
    py.detach(|| schemes::run_pssp(&s, eps, &s.initial()?)).py().map(PySchemeResult)
}

/// Multi-tone scheme in the "low" or "high" field regime.
#[pyfunction]
#[pyo3(signature = (config, regime, species = None))]
fn run_alternative(config: &PyRunConfig, regime: &str, species: Option<&PySpecies>) -> PyResult<PySchemeResult> {
    let regime = match regime {
        "low" => FieldRegime::Low,
        "high" => FieldRegime::High,
        other => return Err(PyValueError::new_err(format!("regime must be 'low' or 'high', got '{other}'"))),
    };
    let sp = load(&config.0, species)?;
    schemes::run_alternative(&config.0, &sp, regime).py().map(PySchemeResult)
}

/// [(intensity, steady_error, fixed_point_error, duration_s)]; failed points
/// raise.
#[pyfunction]
#[pyo3(signature = (config, intensities, species = None))]
fn sweep_intensity(
    py: Python<'_>,
    config: &PyRunConfig,
    intensities: Vec<f64>,
    species: Option<&PySpecies>,
) -> PyResult<Vec<(f64, f64, Option<f64>, f64)>> {
    let s = setup(config, species)?;
    let rows = py.detach(|| schemes::sweep_intensity(&s, &intensities));
    rows.into_iter()
        .map(|r| {
            let res = r.result.map_err(PyRuntimeError::new_err)?;
            Ok((r.intensity, res.steady_error, r.fixed_point_error, res.duration))
        })
        .collect()
}

/// [(species, target, field_tesla, splitting_hz, steady_error or None)].
#[pyfunction]
fn species_scan(py: Python<'_>, config: &PyRunConfig) -> Vec<(String, String, f64, f64, Option<f64>)> {
    let rows = py.detach(|| schemes::cross_species_errors(&config.0, &|n: &str| SpeciesData::builtin(n)));
    rows.into_iter()
        .map(|r| (r.species, r.target, r.field_tesla, r.hyperfine_splitting_hz, r.result.ok().map(|x| x.steady_error)))
        .collect()
}

#[pyfunction]
fn loglog_slope(points: Vec<(f64, f64)>) -> PyResult<f64> {
    schemes::loglog_slope(&points).py()
}

/// (bright-miss, dark-false-bright) for photon threshold `k`.
#[pyfunction]
fn thresholding_error(lambda_bright: f64, background_rate: f64, detect_time: f64, k: u64) -> PyResult<(f64, f64)> {
    budget::thresholding_error(lambda_bright, background_rate, detect_time, k).py()
}

/// Error budget as CSV text, from TOML inputs or the bundled 43Ca+ inputs.
#[pyfunction]
#[pyo3(signature = (inputs = None))]
fn error_budget_csv(inputs: Option<&str>) -> PyResult<String> {
    let inputs = match inputs {
        Some(t) => BudgetInputs::from_toml_str(t).py()?,
        None => BudgetInputs::default_ca43(),
    };
    let sp = SpeciesData::builtin(&inputs.species).py()?;
    Ok(inputs.report(&sp).py()?.to_csv())
}

#[pymodule]
fn ionprep_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySpecies>()?;
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PySchemeResult>()?;
    m.add_function(wrap_pyfunction!(run_fssp, m)?)?;
    m.add_function(wrap_pyfunction!(fixed_point_error, m)?)?;
    m.add_function(wrap_pyfunction!(prepare_from_all_states, m)?)?;
    m.add_function(wrap_pyfunction!(run_pssp, m)?)?;
    m.add_function(wrap_pyfunction!(run_alternative, m)?)?;
    m.add_function(wrap_pyfunction!(sweep_intensity, m)?)?;
    m.add_function(wrap_pyfunction!(species_scan, m)?)?;
    m.add_function(wrap_pyfunction!(loglog_slope, m)?)?;
    m.add_function(wrap_pyfunction!(thresholding_error, m)?)?;
    m.add_function(wrap_pyfunction!(error_budget_csv, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
