use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{check_travel, steps_to_volume, volume_to_steps, DeliveryResult, PumpGeometry, PumpState, PumpStatus};
use crate::dosing::{Decision, DoseRequest, SafetyGate};
use crate::time::SimClock;

/// Consulted before every DELIVER. The error string is forwarded to the client verbatim.
pub trait DoseAuthorizer: Send + Sync {
    fn authorize(&self, request_id: &str, ml: f64) -> std::result::Result<(), String>;
}

/// No prescription attached.
pub struct AllowAll;

impl DoseAuthorizer for AllowAll {
    fn authorize(&self, _: &str, _: f64) -> std::result::Result<(), String> {
        Ok(())
    }
}

pub struct GateAuthorizer {
    pub gate: Arc<SafetyGate>,
    pub clock: SimClock,
}

impl DoseAuthorizer for GateAuthorizer {
    fn authorize(&self, request_id: &str, ml: f64) -> std::result::Result<(), String> {
        let req = DoseRequest { id: request_id.to_string(), ml };
        match self.gate.authorize_and_record(&req, self.clock.now()) {
            Ok(Decision::Authorized) => Ok(()),
            Ok(Decision::Rejected { rule, .. }) => Err(rule.name().to_string()),
            Err(e) => Err(format!("audit: {e}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Cmd {
    Status,
    Deliver,
    Prime,
    Stop,
    Config,
}

impl Cmd {
    fn mutating(self) -> bool {
        self != Cmd::Status
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandFrame {
    pub id: String,
    pub cmd: Cmd,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub volume_ml: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geometry: Option<PumpGeometry>,
}

/// Parse failure: the error code plus the id when it could be read.
pub type FrameError = (&'static str, Option<String>);

impl CommandFrame {
    pub fn new(id: impl Into<String>, cmd: Cmd) -> Self {
        CommandFrame { id: id.into(), cmd, volume_ml: None, geometry: None }
    }

    pub fn deliver(id: impl Into<String>, volume_ml: f64) -> Self {
        CommandFrame { volume_ml: Some(volume_ml), ..CommandFrame::new(id, Cmd::Deliver) }
    }

    pub fn from_value(v: &Value) -> std::result::Result<Self, FrameError> {
        let obj = v.as_object().ok_or(("parse", None))?;
        let id = obj.get("id").and_then(Value::as_str).ok_or(("parse", None))?.to_string();
        let cmd = obj.get("cmd").and_then(Value::as_str).ok_or(("parse", Some(id.clone())))?;
        let cmd = match cmd {
            "STATUS" => Cmd::Status,
            "DELIVER" => Cmd::Deliver,
            "PRIME" => Cmd::Prime,
            "STOP" => Cmd::Stop,
            "CONFIG" => Cmd::Config,
            _ => return Err(("unknown-cmd", Some(id))),
        };
        let volume_ml = match obj.get("volume_ml") {
            None | Some(Value::Null) => None,
            Some(x) => Some(x.as_f64().ok_or(("parse", Some(id.clone())))?),
        };
        let geometry = match obj.get("geometry") {
            None | Some(Value::Null) => None,
            Some(g) => {
                Some(serde_json::from_value(g.clone()).map_err(|_| ("invalid-geometry", Some(id.clone())))?)
            }
        };
        Ok(CommandFrame { id, cmd, volume_ml, geometry })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseFrame {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub ok: bool,
    pub status: PumpStatus,
    pub plunger_mm: f64,
    pub remaining_ml: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delivered_ml: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub latency_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeviceConfig {
    /// Simulated motor time per step.
    pub step_time_ms: f64,
    /// Actually sleep `step_time_ms` per step, so STOP can interrupt a delivery.
    pub realtime: bool,
    pub prime_steps: u64,
}

impl Default for DeviceConfig {
    fn default() -> Self {
        DeviceConfig { step_time_ms: 5.0, realtime: false, prime_steps: 2 }
    }
}

struct Core {
    state: PumpState,
    geometry: PumpGeometry,
    /// Sequence number of the delivery currently moving the plunger.
    in_flight: Option<u64>,
}

#[derive(Default)]
struct Exec {
    next_seq: u64,
    recent: VecDeque<(u64, DeliveryResult)>,
}

/// The pump behind a lock pair: `exec` serializes everything that moves the plunger,
/// `core` is held only briefly so status reads never wait for a delivery.
pub struct Device {
    cfg: DeviceConfig,
    core: Mutex<Core>,
    exec: Mutex<Exec>,
    replay: Mutex<HashMap<String, ResponseFrame>>,
    abort: AtomicBool,
    authorizer: Arc<dyn DoseAuthorizer>,
    steps_actuated: AtomicU64,
}

fn relock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

impl Device {
    pub fn new(geometry: PumpGeometry, cfg: DeviceConfig, authorizer: Arc<dyn DoseAuthorizer>) -> crate::Result<Self> {
        geometry.validate()?;
        Ok(Device {
            cfg,
            core: Mutex::new(Core { state: PumpState::fresh(&geometry), geometry, in_flight: None }),
            exec: Mutex::new(Exec::default()),
            replay: Mutex::new(HashMap::new()),
            abort: AtomicBool::new(false),
            authorizer,
            steps_actuated: AtomicU64::new(0),
        })
    }

    pub fn state(&self) -> PumpState {
        relock(&self.core).state.clone()
    }

    pub fn geometry(&self) -> PumpGeometry {
        relock(&self.core).geometry.clone()
    }

    /// Total motor steps since start, across every command.
    pub fn steps_actuated(&self) -> u64 {
        self.steps_actuated.load(Ordering::SeqCst)
    }

    /// Puts the device in Fault; it then refuses to move.
    pub fn inject_fault(&self) {
        relock(&self.core).state.status = PumpStatus::Fault;
    }

    fn respond(&self, id: Option<&str>, error: Option<&str>, delivered: Option<&DeliveryResult>) -> ResponseFrame {
        let core = relock(&self.core);
        ResponseFrame {
            id: id.map(str::to_string),
            ok: error.is_none(),
            status: core.state.status,
            plunger_mm: core.state.plunger_pos_mm,
            remaining_ml: core.state.remaining_ml,
            delivered_ml: delivered.map(|d| d.delivered_ml),
            steps: delivered.map(|d| d.steps),
            error: error.map(str::to_string),
            latency_ms: 0.0,
        }
    }

    /// One wire line in, one response out, with the handling time in `latency_ms`.
    pub fn handle_line(&self, line: &str) -> ResponseFrame {
        let t0 = Instant::now();
        let mut resp = match serde_json::from_str::<Value>(line) {
            Err(_) => self.respond(None, Some("parse"), None),
            Ok(v) => self.handle_value(&v),
        };
        resp.latency_ms = t0.elapsed().as_secs_f64() * 1e3;
        resp
    }

    /// Handles an already decoded JSON frame; `latency_ms` is left at zero.
    pub fn handle_value(&self, v: &Value) -> ResponseFrame {
        match CommandFrame::from_value(v) {
            Ok(frame) => self.handle_command(&frame),
            Err((code, id)) => self.respond(id.as_deref(), Some(code), None),
        }
    }

    /// Executes a parsed frame. A repeated id on a mutating command returns the
    /// stored response without touching the plunger.
    pub fn handle_command(&self, frame: &CommandFrame) -> ResponseFrame {
        if !frame.cmd.mutating() {
            return self.respond(Some(&frame.id), None, None);
        }
        if let Some(prev) = relock(&self.replay).get(&frame.id) {
            return prev.clone();
        }
        let resp = match frame.cmd {
            Cmd::Stop => self.stop(&frame.id),
            _ => {
                let mut exec = relock(&self.exec);
                // a concurrent twin may have finished while we waited
                if let Some(prev) = relock(&self.replay).get(&frame.id) {
                    return prev.clone();
                }
                match frame.cmd {
                    Cmd::Deliver => self.deliver(&mut exec, &frame.id, frame.volume_ml),
                    Cmd::Prime => self.prime(&mut exec, &frame.id),
                    Cmd::Config => self.configure(&frame.id, frame.geometry.as_ref()),
                    Cmd::Status | Cmd::Stop => unreachable!(),
                }
            }
        };
        relock(&self.replay).insert(frame.id.clone(), resp.clone());
        resp
    }

    fn deliver(&self, exec: &mut Exec, id: &str, volume_ml: Option<f64>) -> ResponseFrame {
        let v = match volume_ml {
            Some(v) if v > 0.0 && v.is_finite() => v,
            _ => return self.respond(Some(id), Some("invalid-volume"), None),
        };
        let steps = {
            let core = relock(&self.core);
            let (steps, _) = volume_to_steps(&core.geometry, v).expect("positive volume");
            if steps == 0 {
                drop(core);
                return self.respond(Some(id), Some("below-step-quantum"), None);
            }
            if let Err(f) = check_travel(&core.state, &core.geometry, steps) {
                drop(core);
                return self.respond(Some(id), Some(f.code()), None);
            }
            steps
        };
        if let Err(reason) = self.authorizer.authorize(id, v) {
            return self.respond(Some(id), Some(&reason), None);
        }
        self.run(exec, id, steps)
    }

    fn prime(&self, exec: &mut Exec, id: &str) -> ResponseFrame {
        {
            let core = relock(&self.core);
            if let Err(f) = check_travel(&core.state, &core.geometry, self.cfg.prime_steps) {
                drop(core);
                return self.respond(Some(id), Some(f.code()), None);
            }
        }
        self.run(exec, id, self.cfg.prime_steps)
    }

    /// Moves the plunger one step at a time so STOP and status reads see progress.
    fn run(&self, exec: &mut Exec, id: &str, steps: u64) -> ResponseFrame {
        let seq = exec.next_seq;
        exec.next_seq += 1;
        self.abort.store(false, Ordering::SeqCst);
        let start = {
            let mut core = relock(&self.core);
            core.state.status = PumpStatus::Delivering;
            core.state.last_command_id = Some(id.to_string());
            core.in_flight = Some(seq);
            core.state.position_steps
        };
        let mut done = 0;
        if self.cfg.realtime {
            let pause = Duration::from_secs_f64(self.cfg.step_time_ms.max(0.0) / 1e3);
            while done < steps && !self.abort.load(Ordering::SeqCst) {
                std::thread::sleep(pause);
                done += 1;
                let mut core = relock(&self.core);
                let g = core.geometry.clone();
                core.state.set_position(&g, start + done);
            }
        } else {
            done = steps;
            let mut core = relock(&self.core);
            let g = core.geometry.clone();
            core.state.set_position(&g, start + done);
        }
        let result = {
            let mut core = relock(&self.core);
            core.state.status = PumpStatus::Idle;
            core.in_flight = None;
            DeliveryResult {
                steps: done,
                delivered_ml: steps_to_volume(&core.geometry, done),
                actuation_ms: done as f64 * self.cfg.step_time_ms,
            }
        };
        self.steps_actuated.fetch_add(done, Ordering::SeqCst);
        exec.recent.push_back((seq, result.clone()));
        if exec.recent.len() > 32 {
            exec.recent.pop_front();
        }
        let error = (done < steps).then_some("stopped");
        self.respond(Some(id), error, Some(&result))
    }

    /// Aborts the delivery in progress, if any, and reports what it managed to push.
    fn stop(&self, id: &str) -> ResponseFrame {
        let target = {
            let core = relock(&self.core);
            if core.state.status == PumpStatus::Delivering {
                self.abort.store(true, Ordering::SeqCst);
            }
            core.in_flight
        };
        let exec = relock(&self.exec);
        let partial = target
            .and_then(|seq| exec.recent.iter().find(|(s, _)| *s == seq).map(|(_, r)| r.clone()))
            .unwrap_or(DeliveryResult { steps: 0, delivered_ml: 0.0, actuation_ms: 0.0 });
        drop(exec);
        self.respond(Some(id), None, Some(&partial))
    }

    fn configure(&self, id: &str, geometry: Option<&PumpGeometry>) -> ResponseFrame {
        let Some(g) = geometry else {
            return self.respond(Some(id), Some("invalid-geometry"), None);
        };
        if g.validate().is_err() {
            return self.respond(Some(id), Some("invalid-geometry"), None);
        }
        let mut core = relock(&self.core);
        if core.state.status != PumpStatus::Idle {
            drop(core);
            return self.respond(Some(id), Some("busy"), None);
        }
        // new geometry means a new syringe, so the plunger starts over
        core.geometry = g.clone();
        core.state = PumpState { last_command_id: Some(id.to_string()), ..PumpState::fresh(g) };
        drop(core);
        self.respond(Some(id), None, None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn device(cfg: DeviceConfig) -> Device {
        Device::new(PumpGeometry::default(), cfg, Arc::new(AllowAll)).unwrap()
    }

    struct Deny;
    impl DoseAuthorizer for Deny {
        fn authorize(&self, _: &str, _: f64) -> std::result::Result<(), String> {
            Err("daily-max-volume".into())
        }
    }

    #[test]
    fn status_on_fresh_pump() {
        let d = device(DeviceConfig::default());
        let r = d.handle_line(r#"{"id":"s","cmd":"STATUS"}"#);
        assert!(r.ok);
        assert_eq!((r.plunger_mm, r.remaining_ml), (0.0, PumpGeometry::default().syringe_capacity_ml));
    }

    #[test]
    fn duplicate_deliver_moves_once() {
        let d = device(DeviceConfig::default());
        let a = d.handle_command(&CommandFrame::deliver("x", 1.0));
        let b = d.handle_command(&CommandFrame::deliver("x", 1.0));
        assert_eq!(a, b);
        assert_eq!(a.steps, Some(34));
        assert_eq!(d.steps_actuated(), 34);
    }

    #[test]
    fn rejected_dose_does_not_move() {
        let d = Device::new(PumpGeometry::default(), DeviceConfig::default(), Arc::new(Deny)).unwrap();
        let r = d.handle_command(&CommandFrame::deliver("y", 1.0));
        assert!(!r.ok);
        assert_eq!(r.error.as_deref(), Some("daily-max-volume"));
        assert_eq!(d.state().position_steps, 0);
    }

    #[test]
    fn malformed_frames_get_error_codes() {
        let d = device(DeviceConfig::default());
        let r = d.handle_line("{not json");
        assert_eq!((r.ok, r.error.as_deref(), r.id.as_deref()), (false, Some("parse"), None));
        let text = serde_json::to_string(&r).unwrap();
        assert!(text.starts_with(r#"{"ok":false"#), "{text}");
        let r = d.handle_line(r#"{"id":"q","cmd":"DANCE"}"#);
        assert_eq!((r.error.as_deref(), r.id.as_deref()), (Some("unknown-cmd"), Some("q")));
        let r = d.handle_line(r#"{"id":"v","cmd":"DELIVER","volume_ml":-1}"#);
        assert_eq!(r.error.as_deref(), Some("invalid-volume"));
    }

    #[test]
    fn travel_limit_leaves_state_unchanged() {
        let d = device(DeviceConfig::default());
        let before = d.state();
        let r = d.handle_command(&CommandFrame::deliver("big", 50.0));
        assert_eq!(r.error.as_deref(), Some("travel-limit"));
        assert_eq!(d.state(), before);
    }

    #[test]
    fn stop_interrupts_realtime_delivery() {
        let d = Arc::new(device(DeviceConfig { step_time_ms: 2.0, realtime: true, prime_steps: 2 }));
        let runner = {
            let d = d.clone();
            std::thread::spawn(move || d.handle_command(&CommandFrame::deliver("long", 5.0)))
        };
        while d.state().status != PumpStatus::Delivering {
            std::thread::yield_now();
        }
        std::thread::sleep(Duration::from_millis(40));
        let stop = d.handle_command(&CommandFrame::new("halt", Cmd::Stop));
        let del = runner.join().unwrap();
        assert_eq!(del.error.as_deref(), Some("stopped"));
        assert!(del.steps.unwrap() < 172);
        assert_eq!(stop.steps, del.steps);
        assert_eq!(d.state().status, PumpStatus::Idle);
        assert_eq!(d.state().position_steps, del.steps.unwrap());
    }

    #[test]
    fn config_only_when_idle() {
        let d = device(DeviceConfig::default());
        let mut f = CommandFrame::new("c", Cmd::Config);
        f.geometry = Some(PumpGeometry::new(400, 5.0, 4.0, 60.0));
        assert!(d.handle_command(&f).ok);
        assert_eq!(d.geometry().steps_per_rev, 400);
        d.inject_fault();
        f.id = "c2".into();
        assert_eq!(d.handle_command(&f).error.as_deref(), Some("busy"));
        assert_eq!(d.handle_command(&CommandFrame::deliver("z", 1.0)).error.as_deref(), Some("fault"));
    }
}
