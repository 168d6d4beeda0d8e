use pyo3::prelude::*;
use pyo3::types::PyDict;
use pyo3::wrap_pymodule;

fn run(code: &std::ffi::CStr) {
    Python::attach(|py| {
        let m = wrap_pymodule!(cardioloop_py::cardioloop_py)(py);
        let globals = PyDict::new(py);
        globals.set_item("cl", m).unwrap();
        if let Err(e) = py.run(code, Some(&globals), None) {
            e.display(py);
            panic!("python code failed");
        }
    });
}

#[test]
fn module_round_trip() {
    run(c"
import json
samples, fs, labels = cl.simulate_record('AFib', 40, seed=3)
assert fs == 125.0 and len(samples) == len(labels) > 0

g = cl.PumpGeometry()
steps, residual = g.volume_to_steps(0.5)
assert abs(steps * g.step_ml + residual - 0.5) < 1e-12
assert abs(residual) <= g.step_ml / 2

m = json.loads(cl.metrics_from_confusion([[45, 5], [10, 40]]))
assert abs(m['accuracy'] - 0.85) < 1e-12, m
assert cl.roc_auc([0.1, 0.4, 0.35, 0.8], [False, False, True, True]) == 0.75

assert cl.score_has_bled(json.dumps({'hypertension': True, 'alcohol_excess': True})) == 2
assert cl.score_cha2ds2_vasc(json.dumps({'stroke_tia_history': True})) == 2
try:
    cl.score_cha2ds2_vasc(json.dumps({'age_75_plus': True, 'age_65_74': True}))
    raise AssertionError('conflicting age bands accepted')
except cl.CardioloopError:
    pass
");
}

#[test]
fn gate_and_closed_loop() {
    run(c"
import json
rx = json.dumps({'dose_ml': 0.5, 'max_doses_per_day': 2, 'min_interdose_interval_s': 3600,
                 'daily_max_ml': 1.0, 'mode': 'PrescriptionBased', 'fixed_times': ['08:00', '16:00']})
assert cl.validate_prescription(rx) == []
gate = cl.SafetyGate(rx, now=0)
assert gate.authorize('a', 0.5, 100) is None
assert gate.authorize('b', 0.5, 200) == 'min-interval'
assert gate.delivered_ml(300) == 0.5

audit, summary = cl.run_closed_loop(json.dumps({'days': 7}))
summary = json.loads(summary)
verdict = json.loads(cl.replay(audit))
assert verdict['consistent'], verdict
assert verdict['deliveries'] == summary['deliveries'] > 0
assert verdict['final_pump'] == summary['final_pump']
");
}
