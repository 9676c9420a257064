//! Python bindings.
//!
//! The engine is driven by the same TOML configuration as the command-line
//! tool; reports come back as plain dictionaries. The `*_json` helpers are
//! ordinary Rust so they can be tested without an interpreter.

use pyo3::exceptions::{PyArithmeticError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use xva_core::config::RunConfig;
use xva_core::contract::{recovery as core_recovery, CollateralMap};
use xva_core::credit::FirstDefault;
use xva_core::pipeline::{run as core_run, Stage};
use xva_core::report::build_report;
use xva_core::stats::expected_shortfall as core_es;
use xva_core::XvaError;

/// Optional overrides applied on top of a parsed configuration.
#[derive(Clone, Copy, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub paths: Option<usize>,
    pub steps: Option<usize>,
}

pub fn parse_stage(name: &str) -> Result<Stage, XvaError> {
    Ok(match name {
        "simulate" => Stage::Simulate,
        "clean-value" | "clean_value" => Stage::CleanValue,
        "solve" => Stage::Solve,
        "hedge" => Stage::Hedge,
        "xva" | "all" => Stage::Xva,
        other => return Err(XvaError::config("stage", format!("unknown stage `{other}`"))),
    })
}

pub fn parse_first(name: &str) -> Result<FirstDefault, XvaError> {
    Ok(match name {
        "bank" => FirstDefault::Bank,
        "counterparty" => FirstDefault::Counterparty,
        "none" => FirstDefault::None,
        other => return Err(XvaError::config("first", format!("expected bank, counterparty or none, got `{other}`"))),
    })
}

/// Parses and validates a configuration string with overrides applied.
pub fn load_config(toml: &str, ov: Overrides) -> Result<RunConfig, XvaError> {
    let mut cfg = RunConfig::from_toml_str(toml)?;
    if let Some(s) = ov.seed {
        cfg.mc.seed = s;
    }
    if let Some(n) = ov.paths {
        cfg.mc.n_paths = n;
    }
    if let Some(n) = ov.steps {
        cfg.grid.n_steps = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Runs the pipeline up to `stage` and returns `report.json` as a string.
pub fn run_report_json(toml: &str, stage: &str, ov: Overrides) -> Result<String, XvaError> {
    let cfg = load_config(toml, ov)?;
    let art = core_run(&cfg, parse_stage(stage)?, None)?;
    Ok(serde_json::to_string(&build_report(&art))?)
}

fn to_py(e: XvaError) -> PyErr {
    match e {
        XvaError::Config { .. } | XvaError::Usage(_) => PyValueError::new_err(e.to_string()),
        XvaError::Numerical { .. } => PyArithmeticError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Runs the engine on a TOML configuration and returns the report as a dict.
#[pyfunction]
#[pyo3(signature = (config, stage = "xva", seed = None, paths = None, steps = None))]
fn run<'py>(
    py: Python<'py>,
    config: &str,
    stage: &str,
    seed: Option<u64>,
    paths: Option<usize>,
    steps: Option<usize>,
) -> PyResult<Bound<'py, PyAny>> {
    let ov = Overrides { seed, paths, steps };
    let json = py.detach(|| run_report_json(config, stage, ov)).map_err(to_py)?;
    py.import("json")?.call_method1("loads", (json,))
}

/// Raises `ValueError` naming the offending field if the configuration is invalid.
#[pyfunction]
fn validate_config(config: &str) -> PyResult<()> {
    load_config(config, Overrides::default()).map(|_| ()).map_err(to_py)
}

/// Collateral `g(v) = sign(v) · max(|α v| − threshold, 0)`.
#[pyfunction]
#[pyo3(signature = (v, alpha, threshold = 0.0))]
fn collateral(v: f64, alpha: f64, threshold: f64) -> f64 {
    CollateralMap { alpha, threshold }.apply(v)
}

/// Close-out recovery on the exposure `y` when `first` defaults.
#[pyfunction]
fn recovery(y: f64, first: &str, recovery_bank: f64, recovery_counterparty: f64) -> PyResult<f64> {
    let who = parse_first(first).map_err(to_py)?;
    Ok(core_recovery(y, who, recovery_bank, recovery_counterparty))
}

/// `(ES, standard error)` of the losses, or `None` with too few samples.
#[pyfunction]
fn expected_shortfall(losses: Vec<f64>, alpha: f64) -> Option<(f64, f64)> {
    core_es(&losses, alpha).map(|e| (e.value, e.std_error))
}

#[pymodule]
fn xva_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(validate_config, m)?)?;
    m.add_function(wrap_pyfunction!(collateral, m)?)?;
    m.add_function(wrap_pyfunction!(recovery, m)?)?;
    m.add_function(wrap_pyfunction!(expected_shortfall, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
