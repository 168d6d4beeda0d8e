//! Python module `cardioloop_py`. Structured values cross the boundary as
//! JSON strings; sample arrays as lists of floats.

use std::path::PathBuf;

use cardioloop::classifier::{self, softmax, Model};
use cardioloop::closed_loop::{self, AuditLog, LoopConfig};
use cardioloop::dosing::{self, DoseRequest, Prescription, SafetyState};
use cardioloop::pathway::{self, ChadsVascFactors, HasBledFactors};
use cardioloop::pump;
use cardioloop::signal_sim::{self, Channel, RhythmClass, SimConfig};
use cardioloop::spectro::{self, MorletParams, ScaleVector, SpectroConfig, Spectrogrammer};
use cardioloop::time::LocalOffset;
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

create_exception!(cardioloop_py, CardioloopError, PyException);

fn err(e: impl std::fmt::Display) -> PyErr {
    CardioloopError::new_err(e.to_string())
}

fn from_json<T: serde::de::DeserializeOwned>(text: &str) -> PyResult<T> {
    serde_json::from_str(text).map_err(err)
}

fn to_json<T: serde::Serialize>(v: &T) -> PyResult<String> {
    serde_json::to_string(v).map_err(err)
}

fn parse<T: std::str::FromStr>(s: &str) -> PyResult<T>
where
    T::Err: std::fmt::Display,
{
    s.parse().map_err(err)
}

/// One synthetic record: `(samples, fs, labels)` for a rhythm class name.
#[pyfunction]
#[pyo3(signature = (class_name, n_rr = 100, seed = 0, channel = "PPG"))]
fn simulate_record(class_name: &str, n_rr: usize, seed: u64, channel: &str) -> PyResult<(Vec<f64>, f64, Vec<String>)> {
    let class: RhythmClass = parse(class_name)?;
    let channel: Channel = parse(channel)?;
    let cfg = SimConfig { channel, ..SimConfig::default() };
    let rr = signal_sim::gen_rr(class, n_rr, &cfg, seed).map_err(err)?;
    let w = signal_sim::rr_to_waveform(&rr, channel, cfg.fs_for(channel)).map_err(err)?;
    let labels = w.sample_labels.iter().map(|l| l.to_string()).collect();
    Ok((w.samples, w.fs, labels))
}

/// Writes a dataset directory and returns its manifest as JSON.
#[pyfunction]
#[pyo3(signature = (out_dir, config_json = None))]
fn simulate_dataset(out_dir: PathBuf, config_json: Option<&str>) -> PyResult<String> {
    let cfg: SimConfig = config_json.map(from_json).transpose()?.unwrap_or_default();
    cfg.validate().map_err(err)?;
    let ds = signal_sim::simulate_dataset(&cfg).map_err(err)?;
    to_json(&signal_sim::write_dataset(&ds, &cfg, &out_dir).map_err(err)?)
}

/// Morlet scalogram magnitudes, one row per scale.
#[pyfunction]
#[pyo3(signature = (signal, scales, fs, f_c = 1.0, sigma = 1.0))]
fn cwt_magnitude(signal: Vec<f64>, scales: Vec<f64>, fs: f64, f_c: f64, sigma: f64) -> PyResult<Vec<Vec<f64>>> {
    let sv = ScaleVector::new(scales, fs).map_err(err)?;
    let s = spectro::cwt(&signal, &sv, &MorletParams { f_c, sigma }).map_err(err)?;
    Ok((0..s.n_scales()).map(|r| s.row(r).iter().map(|c| c.norm()).collect()).collect())
}

/// The classifier image of one window, as rows of pixels in [0, 1].
#[pyfunction]
#[pyo3(signature = (samples, fs, channel = "PPG", config_json = None))]
fn spectrogram(samples: Vec<f64>, fs: f64, channel: &str, config_json: Option<&str>) -> PyResult<Vec<Vec<f64>>> {
    let mut cfg: SpectroConfig = config_json.map(from_json).transpose()?.unwrap_or_default();
    cfg.window_s = samples.len() as f64 / fs;
    let sg = Spectrogrammer::new(&cfg, parse(channel)?, fs).map_err(err)?;
    let img = sg.image(&samples, None).map_err(err)?;
    Ok(img.pixels.chunks(img.width).map(<[f64]>::to_vec).collect())
}

/// Metrics of a confusion matrix (rows are truth) as JSON.
#[pyfunction]
fn metrics_from_confusion(confusion: Vec<Vec<u64>>) -> PyResult<String> {
    to_json(&classifier::metrics_from_confusion(&confusion).map_err(err)?)
}

#[pyfunction]
#[pyo3(signature = (scores, labels, n_thresholds = None))]
fn roc_auc(scores: Vec<f64>, labels: Vec<bool>, n_thresholds: Option<usize>) -> PyResult<f64> {
    match n_thresholds {
        Some(n) => classifier::roc_auc_fixed_thresholds(&scores, &labels, n),
        None => classifier::roc_auc(&scores, &labels),
    }
    .map_err(err)
}

#[pyfunction]
fn score_has_bled(factors_json: &str) -> PyResult<u8> {
    Ok(pathway::score_has_bled(&from_json::<HasBledFactors>(factors_json)?))
}

#[pyfunction]
fn score_cha2ds2_vasc(factors_json: &str) -> PyResult<u8> {
    pathway::score_cha2ds2_vasc(&from_json::<ChadsVascFactors>(factors_json)?).map_err(err)
}

/// Prescription violations as strings; empty when valid.
#[pyfunction]
fn validate_prescription(prescription_json: &str) -> PyResult<Vec<String>> {
    let p: Prescription = from_json(prescription_json)?;
    Ok(dosing::validate_prescription(&p).err().unwrap_or_default().iter().map(|v| v.to_string()).collect())
}

#[pyclass(name = "PumpGeometry", from_py_object)]
#[derive(Clone)]
struct PyPumpGeometry {
    inner: pump::PumpGeometry,
}

#[pymethods]
impl PyPumpGeometry {
    #[new]
    #[pyo3(signature = (steps_per_rev = 200, pinion_radius_mm = 6.0, syringe_inner_radius_mm = 7.0, plunger_travel_mm = 65.0))]
    fn new(
        steps_per_rev: u32,
        pinion_radius_mm: f64,
        syringe_inner_radius_mm: f64,
        plunger_travel_mm: f64,
    ) -> PyResult<Self> {
        let inner = pump::PumpGeometry::new(steps_per_rev, pinion_radius_mm, syringe_inner_radius_mm, plunger_travel_mm);
        inner.validate().map_err(err)?;
        Ok(PyPumpGeometry { inner })
    }

    #[getter]
    fn step_ml(&self) -> f64 {
        self.inner.step_ml()
    }

    #[getter]
    fn max_steps(&self) -> u64 {
        self.inner.max_steps()
    }

    #[getter]
    fn syringe_capacity_ml(&self) -> f64 {
        self.inner.syringe_capacity_ml
    }

    /// `(steps, residual_ml)` for a requested volume.
    fn volume_to_steps(&self, ml: f64) -> PyResult<(u64, f64)> {
        pump::volume_to_steps(&self.inner, ml).map_err(err)
    }

    fn steps_to_volume(&self, steps: u64) -> f64 {
        pump::steps_to_volume(&self.inner, steps)
    }

    fn to_json(&self) -> PyResult<String> {
        to_json(&self.inner)
    }
}

/// Dose authorization over a prescription with the delivery history it has booked.
#[pyclass(name = "SafetyGate")]
struct PySafetyGate {
    prescription: Prescription,
    state: SafetyState,
}

#[pymethods]
impl PySafetyGate {
    #[new]
    #[pyo3(signature = (prescription_json, now, utc_offset_s = 0))]
    fn new(prescription_json: &str, now: i64, utc_offset_s: i32) -> PyResult<Self> {
        let prescription = Prescription::from_json_validated(prescription_json).map_err(err)?;
        Ok(PySafetyGate { prescription, state: SafetyState::new(LocalOffset(utc_offset_s), now) })
    }

    /// Returns `None` when granted (and books the dose) or the violated rule name.
    fn authorize(&mut self, request_id: &str, ml: f64, now: i64) -> PyResult<Option<String>> {
        let req = DoseRequest { id: request_id.to_string(), ml };
        match dosing::authorize_dose(&self.state, &self.prescription, &req, now) {
            dosing::Decision::Authorized => {
                self.state = dosing::record_delivery(&self.state, dosing::Delivery { ts: now, ml }).map_err(err)?;
                Ok(None)
            }
            dosing::Decision::Rejected { rule, .. } => Ok(Some(rule.name().to_string())),
        }
    }

    fn delivered_ml(&self, now: i64) -> f64 {
        self.state.delivered_ml(now)
    }
}

/// A trained classifier checkpoint.
#[pyclass(name = "Classifier")]
struct PyClassifier {
    model: Model,
}

#[pymethods]
impl PyClassifier {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyClassifier { model: classifier::load_checkpoint(&path).map_err(err)? })
    }

    #[getter]
    fn classes(&self) -> Vec<String> {
        self.model.classes.iter().map(|c| c.to_string()).collect()
    }

    /// Class probabilities for one image given as rows of pixels.
    fn predict(&self, image: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        let height = image.len();
        let width = image.first().map_or(0, Vec::len);
        let img = spectro::SpectroImage { height, width, pixels: image.concat(), label: None };
        Ok(softmax(&self.model.logits(&img).map_err(err)?))
    }
}

/// Runs a scenario; returns `(audit_jsonl, summary_json)`.
#[pyfunction]
#[pyo3(signature = (scenario_json = None))]
fn run_closed_loop(py: Python<'_>, scenario_json: Option<&str>) -> PyResult<(String, String)> {
    let cfg = match scenario_json {
        Some(text) => LoopConfig::from_json(text).map_err(err)?,
        None => LoopConfig::default(),
    };
    let out = py.detach(|| closed_loop::run_closed_loop(&cfg)).map_err(err)?;
    let summary = serde_json::json!({
        "records": out.audit.len(),
        "deliveries": out.deliveries,
        "final_stage": out.final_stage,
        "final_pump": out.final_pump,
        "halted": out.halted,
    });
    Ok((out.audit.to_jsonl().map_err(err)?, summary.to_string()))
}

/// Verdict JSON for an audit log.
#[pyfunction]
fn replay(audit_jsonl: &str) -> PyResult<String> {
    let log = AuditLog::from_jsonl(audit_jsonl).map_err(err)?;
    to_json(&closed_loop::replay(&log))
}

#[pymodule]
pub fn cardioloop_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("CardioloopError", m.py().get_type::<CardioloopError>())?;
    m.add_class::<PyPumpGeometry>()?;
    m.add_class::<PySafetyGate>()?;
    m.add_class::<PyClassifier>()?;
    m.add_function(wrap_pyfunction!(simulate_record, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(cwt_magnitude, m)?)?;
    m.add_function(wrap_pyfunction!(spectrogram, m)?)?;
    m.add_function(wrap_pyfunction!(metrics_from_confusion, m)?)?;
    m.add_function(wrap_pyfunction!(roc_auc, m)?)?;
    m.add_function(wrap_pyfunction!(score_has_bled, m)?)?;
    m.add_function(wrap_pyfunction!(score_cha2ds2_vasc, m)?)?;
    m.add_function(wrap_pyfunction!(validate_prescription, m)?)?;
    m.add_function(wrap_pyfunction!(run_closed_loop, m)?)?;
    m.add_function(wrap_pyfunction!(replay, m)?)?;
    Ok(())
}
