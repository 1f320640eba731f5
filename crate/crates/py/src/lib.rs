//! Python bindings. Structured results cross the boundary as plain Python
//! dicts and lists built from their JSON form.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

use wmqkd_core as core;
use wmqkd_core::keyrate::{self, KeyRateReport, LinkTemplate};
use wmqkd_core::scenario::{Mode, RunConfig, Scenario};

create_exception!(wmqkd, WmqkdError, PyException, "Error raised by the simulator; carries `kind` and `field`.");

fn err(e: core::Error) -> PyErr {
    let field = e.field().map(str::to_owned);
    let py_err = WmqkdError::new_err(e.to_string());
    Python::attach(|py| {
        let v = py_err.value(py);
        let _ = v.setattr("kind", e.kind());
        let _ = v.setattr("field", field);
    });
    py_err
}

fn to_py<T: Serialize + ?Sized>(py: Python<'_>, value: &T) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| err(e.into()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn from_py<T: DeserializeOwned>(py: Python<'_>, obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = py.import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| err(e.into()))
}

fn parse_outcome(s: &str) -> PyResult<core::Outcome> {
    use core::Outcome::*;
    Ok(match s {
        "H" => H,
        "V" => V,
        "D" => D,
        "A" => A,
        _ => return Err(WmqkdError::new_err(format!("unknown outcome {s:?}"))),
    })
}

fn parse_scenario(s: &str) -> PyResult<Scenario> {
    Ok(match s {
        "fig3b" => Scenario::Fig3b,
        "fig3d" => Scenario::Fig3d,
        "custom" => Scenario::Custom,
        _ => return Err(WmqkdError::new_err(format!("unknown scenario {s:?}"))),
    })
}

fn parse_mode(s: &str) -> PyResult<Mode> {
    Ok(match s {
        "montecarlo" => Mode::Montecarlo,
        "analytic" => Mode::Analytic,
        "both" => Mode::Both,
        _ => return Err(WmqkdError::new_err(format!("unknown mode {s:?}"))),
    })
}

/// One detection event; `tick_time` is in tagger ticks.
#[pyclass(name = "TimeTag", from_py_object)]
#[derive(Clone)]
struct PyTimeTag {
    #[pyo3(get, set)]
    detector_id: u32,
    #[pyo3(get, set)]
    tick_time: i64,
    #[pyo3(get, set)]
    outcome: String,
    #[pyo3(get, set)]
    channel_index: u32,
    #[pyo3(get, set)]
    dark: bool,
}

#[pymethods]
impl PyTimeTag {
    #[new]
    #[pyo3(signature = (detector_id, tick_time, outcome = "H".to_string(), channel_index = 1, dark = false))]
    fn new(detector_id: u32, tick_time: i64, outcome: String, channel_index: u32, dark: bool) -> PyResult<Self> {
        parse_outcome(&outcome)?;
        Ok(Self {
            detector_id,
            tick_time,
            outcome,
            channel_index,
            dark,
        })
    }

    fn __repr__(&self) -> String {
        format!(
            "TimeTag(detector_id={}, tick_time={}, outcome={:?}, channel_index={}, dark={})",
            self.detector_id,
            self.tick_time,
            self.outcome,
            self.channel_index,
            if self.dark { "True" } else { "False" }
        )
    }
}

impl PyTimeTag {
    fn to_core(&self) -> PyResult<core::TimeTag> {
        Ok(core::TimeTag {
            detector_id: self.detector_id,
            tick_time: self.tick_time,
            outcome: parse_outcome(&self.outcome)?,
            channel_index: self.channel_index,
            dark: self.dark,
        })
    }

    fn from_core(t: &core::TimeTag) -> Self {
        Self {
            detector_id: t.detector_id,
            tick_time: t.tick_time,
            outcome: t.outcome.as_str().to_owned(),
            channel_index: t.channel_index,
            dark: t.dark,
        }
    }
}

fn tags(v: &[PyTimeTag]) -> PyResult<Vec<core::TimeTag>> {
    v.iter().map(PyTimeTag::to_core).collect()
}

/// Laboratory link: source, channel plan, detectors and loss.
#[pyclass(name = "LinkSetup")]
struct PyLinkSetup {
    inner: core::LinkSetup,
}

#[pymethods]
impl PyLinkSetup {
    /// Calibrated two-channel laboratory setup at `loss_db` total loss.
    #[staticmethod]
    fn table1(loss_db: f64) -> Self {
        Self {
            inner: core::Calibration::frozen().table1_setup(loss_db),
        }
    }

    #[staticmethod]
    fn from_dict(py: Python<'_>, d: &Bound<'_, PyAny>) -> PyResult<Self> {
        let inner: core::LinkSetup = from_py(py, d)?;
        inner.validate().map_err(err)?;
        Ok(Self { inner })
    }

    fn to_dict(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner)
    }

    #[getter]
    fn loss_db(&self) -> f64 {
        self.inner.loss_db
    }

    #[setter]
    fn set_loss_db(&mut self, v: f64) {
        self.inner.loss_db = v;
    }

    /// Full-spectrum pair emission rate, pairs/s.
    #[getter]
    fn pair_rate(&self) -> f64 {
        self.inner.source.pair_rate
    }

    #[setter]
    fn set_pair_rate(&mut self, v: f64) {
        self.inner.source.pair_rate = v;
    }

    fn analytic_channel(&self, py: Python<'_>, pos: usize) -> PyResult<Py<PyAny>> {
        if pos >= self.inner.plan.pairs.len() {
            return Err(WmqkdError::new_err(format!("no channel at position {pos}")));
        }
        to_py(py, &self.inner.analytic_channel(pos))
    }

    fn analytic_merged(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        to_py(py, &self.inner.analytic_merged())
    }

    /// Simulates an HV and a DA block of `duration` seconds each and returns
    /// the key-rate report (per channel plus the merged receivers).
    fn simulate(&self, py: Python<'_>, duration: f64, seed: u64) -> PyResult<Py<PyAny>> {
        let setup = self.inner.clone();
        let report = py
            .detach(move || -> core::Result<KeyRateReport> {
                let mc = setup.simulate(duration, seed)?;
                let mut tallies = mc.channels.clone();
                tallies.extend(mc.merged.clone());
                KeyRateReport::from_tallies(&tallies, setup.f_ec)
            })
            .map_err(err)?;
        to_py(py, &report)
    }
}

#[pyfunction]
#[pyo3(signature = (f_ec = keyrate::DEFAULT_F_EC))]
fn qber_threshold(f_ec: f64) -> PyResult<f64> {
    core::qber_threshold(f_ec).map_err(err)
}

#[pyfunction]
fn binary_entropy(x: f64) -> PyResult<f64> {
    core::binary_entropy(x).map_err(err)
}

/// Secure key bits from per-basis coincidence counts and QBERs.
#[pyfunction]
#[pyo3(signature = (cc_hv, q_hv, cc_da, q_da, f_ec = keyrate::DEFAULT_F_EC))]
fn secure_key(cc_hv: f64, q_hv: f64, cc_da: f64, q_da: f64, f_ec: f64) -> f64 {
    keyrate::secure_key_from_qber(cc_hv, q_hv, cc_da, q_da, f_ec)
}

/// Closed-form rates of one channel; `model` uses the field names of the
/// Rust `AnalyticLinkModel`.
#[pyfunction]
fn analytic_rates(py: Python<'_>, model: &Bound<'_, PyAny>) -> PyResult<Py<PyAny>> {
    let m: core::AnalyticLinkModel = from_py(py, model)?;
    m.validate().map_err(err)?;
    to_py(py, &core::analytic_rates(&m))
}

#[pyfunction]
fn optimize_pair_rate(py: Python<'_>, model: &Bound<'_, PyAny>, lo: f64, hi: f64) -> PyResult<Py<PyAny>> {
    let m: core::AnalyticLinkModel = from_py(py, model)?;
    to_py(py, &core::optimize_pair_rate(&m, lo, hi).map_err(err)?)
}

/// n-channel scaling curve with the frozen scaling template. `template`
/// overrides it when given (keys `base`, `receiver_efficiency_alice/bob`).
#[pyfunction]
#[pyo3(signature = (n_values, loss_grid, optimize = true, template = None))]
fn scaling_curve(
    py: Python<'_>,
    n_values: Vec<u32>,
    loss_grid: Vec<f64>,
    optimize: bool,
    template: Option<&Bound<'_, PyAny>>,
) -> PyResult<Py<PyAny>> {
    let cal = core::Calibration::frozen();
    let t: LinkTemplate = match template {
        Some(d) => from_py(py, d)?,
        None => cal.scaling_template(),
    };
    let [lo, hi] = cal.scaling.pair_rate_bracket;
    let pts = core::scaling_curve(&t, &n_values, &loss_grid, optimize.then_some((lo, hi))).map_err(err)?;
    to_py(py, &pts)
}

/// Greedy one-to-one matching; returns `(alice_index, bob_index)` pairs.
#[pyfunction]
#[pyo3(signature = (alice, bob, t_c, tick = core::TAGGER_TICK))]
fn find_coincidences(alice: Vec<PyTimeTag>, bob: Vec<PyTimeTag>, t_c: f64, tick: f64) -> PyResult<Vec<(usize, usize)>> {
    let w = core::CoincidenceWindow { t_c };
    let m = core::find_coincidences(&tags(&alice)?, &tags(&bob)?, &w, tick).map_err(err)?;
    Ok(m.into_iter().map(|m| (m.alice, m.bob)).collect())
}

#[pyfunction]
#[pyo3(signature = (tags_a, tags_b, global_dead_time, tick = core::TAGGER_TICK))]
fn merge_detectors(
    tags_a: Vec<PyTimeTag>,
    tags_b: Vec<PyTimeTag>,
    global_dead_time: f64,
    tick: f64,
) -> PyResult<Vec<PyTimeTag>> {
    let m = core::merge_detectors(&tags(&tags_a)?, &tags(&tags_b)?, global_dead_time, tick).map_err(err)?;
    Ok(m.iter().map(PyTimeTag::from_core).collect())
}

#[pyfunction]
fn table1_plan(py: Python<'_>) -> PyResult<Py<PyAny>> {
    to_py(py, &core::Calibration::frozen().table1_plan())
}

/// Band and pair counts of a fixed-spacing grid over a wavelength window.
#[pyfunction]
fn grid_summary(py: Python<'_>, low_nm: f64, high_nm: f64, spacing_ghz: f64, bandwidth_ghz: f64) -> PyResult<Py<PyAny>> {
    let g = core::build_grid_plan(low_nm, high_nm, spacing_ghz * 1e9, bandwidth_ghz * 1e9).map_err(err)?;
    let summary = serde_json::json!({
        "band_count": g.band_count,
        "pair_count": g.pair_count(),
        "unpaired_count": g.unpaired_count,
    });
    to_py(py, &summary)
}

#[pyfunction]
fn coherence_time(bandwidth_hz: f64) -> PyResult<f64> {
    core::coherence_time(bandwidth_hz).map_err(err)
}

#[pyfunction]
fn calibration(py: Python<'_>) -> PyResult<Py<PyAny>> {
    to_py(py, core::Calibration::frozen())
}

/// Runs a scenario like the CLI does; `config` is TOML text.
#[pyfunction]
#[pyo3(signature = (scenario, out_dir, config = None, seed = None, mode = None))]
fn run(
    py: Python<'_>,
    scenario: &str,
    out_dir: PathBuf,
    config: Option<&str>,
    seed: Option<u64>,
    mode: Option<&str>,
) -> PyResult<Py<PyAny>> {
    let sc = parse_scenario(scenario)?;
    let mut cfg = match config {
        Some(text) => RunConfig::from_toml(sc, text).map_err(err)?,
        None => RunConfig::defaults(sc),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(m) = mode {
        cfg.mode = parse_mode(m)?;
    }
    cfg.validate().map_err(err)?;
    let out = py
        .detach(move || core::scenario::run(&cfg, &out_dir))
        .map_err(err)?;
    let files: Vec<String> = out.files.iter().map(|p| p.display().to_string()).collect();
    to_py(py, &serde_json::json!({ "files": files, "warnings": out.warnings }))
}

#[pymodule]
#[pyo3(name = "wmqkd")]
fn wmqkd_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("WmqkdError", m.py().get_type::<WmqkdError>())?;
    m.add("TAGGER_TICK", core::TAGGER_TICK)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyTimeTag>()?;
    m.add_class::<PyLinkSetup>()?;
    m.add_function(wrap_pyfunction!(qber_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(binary_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(secure_key, m)?)?;
    m.add_function(wrap_pyfunction!(analytic_rates, m)?)?;
    m.add_function(wrap_pyfunction!(optimize_pair_rate, m)?)?;
    m.add_function(wrap_pyfunction!(scaling_curve, m)?)?;
    m.add_function(wrap_pyfunction!(find_coincidences, m)?)?;
    m.add_function(wrap_pyfunction!(merge_detectors, m)?)?;
    m.add_function(wrap_pyfunction!(table1_plan, m)?)?;
    m.add_function(wrap_pyfunction!(grid_summary, m)?)?;
    m.add_function(wrap_pyfunction!(coherence_time, m)?)?;
    m.add_function(wrap_pyfunction!(calibration, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for s in ["H", "V", "D", "A"] {
            assert_eq!(parse_outcome(s).unwrap().as_str(), s);
        }
        assert!(parse_outcome("X").is_err());
        assert!(matches!(parse_scenario("fig3d"), Ok(Scenario::Fig3d)));
        assert!(parse_scenario("fig4").is_err());
        assert!(matches!(parse_mode("both"), Ok(Mode::Both)));
        assert!(parse_mode("fast").is_err());
    }

    #[test]
    fn tag_conversion_is_lossless() {
        let t = PyTimeTag::new(3, -17, "D".into(), 2, true).unwrap();
        let back = PyTimeTag::from_core(&t.to_core().unwrap());
        assert_eq!(back.__repr__(), t.__repr__());
    }
}
