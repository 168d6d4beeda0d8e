use std::collections::VecDeque;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::device::{CommandFrame, Device, ResponseFrame};
use crate::dosing::{Prescription, SafetyGate};
use crate::error::{Error, Result};
use crate::pathway::{circadian_profile, DetectionEvent, EpisodeLog, Pathway, PathwayConfig, PathwayEvent};
use crate::time::{LocalOffset, SimClock, Timestamp};

fn relock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamFrame {
    pub stream: String,
    /// Monotone per hub, so a reconnecting client can drop what it already saw.
    pub seq: u64,
    pub event: DetectionEvent,
}

/// Fan-out of detection events to stream subscribers, with a short replay buffer.
#[derive(Default)]
pub struct EventHub {
    next: AtomicU64,
    inner: Mutex<HubInner>,
}

#[derive(Default)]
struct HubInner {
    subscribers: Vec<Sender<StreamFrame>>,
    history: VecDeque<StreamFrame>,
}

const HUB_HISTORY: usize = 1024;

impl EventHub {
    pub fn publish(&self, event: DetectionEvent) {
        let mut inner = relock(&self.inner);
        let frame = StreamFrame { stream: "detection".into(), seq: self.next.fetch_add(1, Ordering::SeqCst), event };
        inner.subscribers.retain(|tx| tx.send(frame.clone()).is_ok());
        inner.history.push_back(frame);
        if inner.history.len() > HUB_HISTORY {
            inner.history.pop_front();
        }
    }

    /// Frames with `seq >= since` still buffered, then everything published afterwards.
    pub fn subscribe(&self, since: Option<u64>) -> Receiver<StreamFrame> {
        let (tx, rx) = mpsc::channel();
        let mut inner = relock(&self.inner);
        if let Some(since) = since {
            for f in inner.history.iter().filter(|f| f.seq >= since) {
                let _ = tx.send(f.clone());
            }
        }
        inner.subscribers.push(tx);
        rx
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PendingDose {
    pub dose_id: String,
    pub ts: Timestamp,
    pub ml: f64,
}

/// Patient-side state the gateway reads and steers.
pub struct GatewayState {
    pub offset: LocalOffset,
    pub clock: SimClock,
    pub gate: Option<Arc<SafetyGate>>,
    pub hub: EventHub,
    pathway: Mutex<Pathway>,
    log: Mutex<EpisodeLog>,
    pending: Mutex<Vec<PendingDose>>,
    manual_seq: AtomicU64,
}

impl GatewayState {
    pub fn new(
        patient_id: &str,
        offset: LocalOffset,
        clock: SimClock,
        gate: Option<Arc<SafetyGate>>,
        cfg: PathwayConfig,
    ) -> Self {
        let log = EpisodeLog::new(cfg.merge_gap_s);
        GatewayState {
            offset,
            gate,
            hub: EventHub::default(),
            pathway: Mutex::new(Pathway::new(patient_id, clock.now(), cfg)),
            log: Mutex::new(log),
            pending: Mutex::new(Vec::new()),
            manual_seq: AtomicU64::new(0),
            clock,
        }
    }

    /// Logs a detection, steps the pathway and pushes it to subscribers.
    pub fn record_detection(&self, e: DetectionEvent) -> Result<()> {
        relock(&self.log).log(e.clone())?;
        relock(&self.pathway).apply(&PathwayEvent::Detection(e.clone()))?;
        self.hub.publish(e);
        Ok(())
    }

    pub fn apply_event(&self, e: &PathwayEvent) -> Result<()> {
        if let PathwayEvent::Detection(d) = e {
            return self.record_detection(d.clone());
        }
        relock(&self.pathway).apply(e).map(|_| ())
    }

    pub fn post_pending(&self, dose: PendingDose) {
        relock(&self.pending).push(dose);
    }

    pub fn pathway(&self) -> Pathway {
        relock(&self.pathway).clone()
    }

    pub fn episodes(&self) -> EpisodeLog {
        relock(&self.log).clone()
    }

    fn take_pending(&self, dose_id: &str) -> Option<PendingDose> {
        let mut p = relock(&self.pending);
        let i = p.iter().position(|d| d.dose_id == dose_id)?;
        Some(p.remove(i))
    }
}

pub struct ServiceConfig {
    pub max_line_bytes: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig { max_line_bytes: 64 * 1024 }
    }
}

struct Service {
    device: Arc<Device>,
    gateway: Arc<GatewayState>,
    cfg: ServiceConfig,
}

enum Reply {
    Line(String),
    /// Acknowledgement line, then the stream.
    Stream(String, Receiver<StreamFrame>),
}

impl Service {
    fn handle(&self, line: &[u8]) -> Reply {
        let t0 = Instant::now();
        let value = std::str::from_utf8(line).ok().and_then(|s| serde_json::from_str::<Value>(s).ok());
        let is_gateway = value.as_ref().is_some_and(|v| v.get("op").is_some());
        if !is_gateway {
            let mut resp = match &value {
                Some(v) => self.device.handle_value(v),
                None => self.device.handle_line(""),
            };
            resp.latency_ms = t0.elapsed().as_secs_f64() * 1e3;
            return Reply::Line(serde_json::to_string(&resp).expect("response serializes"));
        }
        let v = value.expect("gateway frame parsed");
        let (mut body, stream) = self.gateway(&v);
        if let Some(obj) = body.as_object_mut() {
            if let Some(id) = v.get("id") {
                obj.insert("id".into(), id.clone());
            }
            obj.insert("latency_ms".into(), json!(t0.elapsed().as_secs_f64() * 1e3));
        }
        if stream.is_some() {
            let rx = self.gateway.hub.subscribe(v.get("since").and_then(Value::as_u64));
            return Reply::Stream(body.to_string(), rx);
        }
        Reply::Line(body.to_string())
    }

    fn pump_json(resp: &ResponseFrame) -> Value {
        serde_json::to_value(resp).expect("response serializes")
    }

    fn gateway(&self, v: &Value) -> (Value, Option<()>) {
        let g = &self.gateway;
        let op = v.get("op").and_then(Value::as_str).unwrap_or("");
        let fail = |code: &str| json!({"ok": false, "op": op, "error": code});
        let now = g.clock.now();
        match op {
            "get_status" => {
                let pw = g.pathway();
                let st = self.device.state();
                let (today, prescription) = match &g.gate {
                    Some(gate) => {
                        let s = gate.state();
                        (s.today(now).to_vec(), Some(gate.prescription()))
                    }
                    None => (Vec::new(), None),
                };
                let pending = relock(&g.pending).clone();
                (
                    json!({
                        "ok": true, "op": op, "now": now,
                        "pump": {"status": st.status, "plunger_mm": st.plunger_pos_mm, "remaining_ml": st.remaining_ml,
                                 "last_command_id": st.last_command_id},
                        "stage": pw.state.stage, "stage_entered_at": pw.state.entered_at,
                        "delivered_today": today,
                        "delivered_ml_today": today.iter().map(|d| d.ml).sum::<f64>(),
                        "prescription": prescription, "pending": pending,
                    }),
                    None,
                )
            }
            "get_episodes" => {
                let log = g.episodes();
                (json!({"ok": true, "op": op, "episodes": log.episodes, "n_events": log.events.len()}), None)
            }
            "get_profile" => {
                let profile = circadian_profile(&g.episodes(), g.offset);
                (json!({"ok": true, "op": op, "profile": profile}), None)
            }
            "get_prescription" => match &g.gate {
                Some(gate) => (json!({"ok": true, "op": op, "prescription": gate.prescription()}), None),
                None => (fail("no-prescription"), None),
            },
            "put_prescription" => {
                let Some(gate) = &g.gate else { return (fail("no-prescription"), None) };
                let parsed: std::result::Result<Prescription, _> =
                    serde_json::from_value(v.get("prescription").cloned().unwrap_or(Value::Null));
                match parsed {
                    Err(_) => (fail("parse"), None),
                    Ok(p) => match gate.set_prescription(p) {
                        Ok(()) => (json!({"ok": true, "op": op, "prescription": gate.prescription()}), None),
                        Err(Error::Prescription(violations)) => (
                            json!({"ok": false, "op": op, "error": "invalid-prescription", "violations": violations}),
                            None,
                        ),
                        Err(e) => (fail(&e.to_string()), None),
                    },
                }
            }
            "subscribe_stream" => (json!({"ok": true, "op": op, "stream": "detection"}), Some(())),
            "manual_dose" => {
                let Some(ml) = v.get("ml").and_then(Value::as_f64) else { return (fail("invalid-volume"), None) };
                let id = match v.get("id").and_then(Value::as_str) {
                    Some(id) => format!("manual-{id}"),
                    None => format!("manual-{}", g.manual_seq.fetch_add(1, Ordering::SeqCst)),
                };
                let resp = self.device.handle_command(&CommandFrame::deliver(id, ml));
                (json!({"ok": resp.ok, "op": op, "error": resp.error, "pump": Self::pump_json(&resp)}), None)
            }
            "approve_dose" => {
                let Some(dose_id) = v.get("dose_id").and_then(Value::as_str) else { return (fail("parse"), None) };
                let Some(dose) = g.take_pending(dose_id) else { return (fail("unknown-dose"), None) };
                let resp = self.device.handle_command(&CommandFrame::deliver(dose.dose_id, dose.ml));
                (json!({"ok": resp.ok, "op": op, "error": resp.error, "pump": Self::pump_json(&resp)}), None)
            }
            "deny_dose" => {
                let Some(dose_id) = v.get("dose_id").and_then(Value::as_str) else { return (fail("parse"), None) };
                match g.take_pending(dose_id) {
                    Some(d) => (json!({"ok": true, "op": op, "denied": d}), None),
                    None => (fail("unknown-dose"), None),
                }
            }
            "post_event" => {
                let parsed: std::result::Result<PathwayEvent, _> =
                    serde_json::from_value(v.get("event").cloned().unwrap_or(Value::Null));
                match parsed {
                    Err(_) => (fail("parse"), None),
                    Ok(e) => match g.apply_event(&e) {
                        Ok(()) => (json!({"ok": true, "op": op, "stage": g.pathway().state.stage}), None),
                        Err(err) => (fail(&err.to_string()), None),
                    },
                }
            }
            _ => (fail("unknown-op"), None),
        }
    }
}

/// One write per frame so small responses are not split across packets.
fn write_frame(w: &mut impl Write, mut text: String) -> std::io::Result<()> {
    text.push('\n');
    w.write_all(text.as_bytes())
}

fn serve_connection(stream: TcpStream, svc: Arc<Service>) -> std::io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = stream;
    let limit = svc.cfg.max_line_bytes as u64;
    let mut buf = Vec::new();
    loop {
        buf.clear();
        let n = reader.by_ref().take(limit + 1).read_until(b'\n', &mut buf)?;
        if n == 0 {
            return Ok(());
        }
        if buf.last() != Some(&b'\n') && buf.len() as u64 > limit {
            // oversized frame: skip to the end of the line and answer once
            let mut sink = Vec::new();
            reader.read_until(b'\n', &mut sink)?;
            buf.clear();
            buf.extend_from_slice(b"\xff");
        }
        while matches!(buf.last(), Some(b'\n' | b'\r')) {
            buf.pop();
        }
        if buf.iter().all(u8::is_ascii_whitespace) {
            continue;
        }
        match svc.handle(&buf) {
            Reply::Line(text) => write_frame(&mut writer, text)?,
            Reply::Stream(ack, rx) => {
                write_frame(&mut writer, ack)?;
                for frame in rx {
                    write_frame(&mut writer, serde_json::to_string(&frame).expect("frame serializes"))?;
                }
                return Ok(());
            }
        }
    }
}

pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Blocks until the accept loop exits.
    pub fn join(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }

    pub fn shutdown(mut self) {
        self.stop_accepting();
    }

    fn stop_accepting(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.addr);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if self.thread.is_some() {
            self.stop_accepting();
        }
    }
}

/// Starts the line-JSON service: pump frames carry `cmd`, gateway frames carry `op`.
/// One thread per connection; plunger motion is serialized inside the device.
pub fn serve(
    bind: impl ToSocketAddrs,
    device: Arc<Device>,
    gateway: Arc<GatewayState>,
    cfg: ServiceConfig,
) -> Result<ServerHandle> {
    let listener = TcpListener::bind(bind)?;
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let svc = Arc::new(Service { device, gateway, cfg });
    let flag = stop.clone();
    let thread = thread::spawn(move || {
        for conn in listener.incoming() {
            if flag.load(Ordering::SeqCst) {
                break;
            }
            let Ok(conn) = conn else { continue };
            let _ = conn.set_nodelay(true);
            let svc = svc.clone();
            thread::spawn(move || {
                let _ = serve_connection(conn, svc);
            });
        }
    });
    Ok(ServerHandle { addr, stop, thread: Some(thread) })
}

/// Blocking line client for the pump and gateway protocol.
pub struct PumpClient {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl PumpClient {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(PumpClient { reader: BufReader::new(stream.try_clone()?), writer: stream })
    }

    pub fn send_line(&mut self, line: &str) -> Result<String> {
        write_frame(&mut self.writer, line.to_string())?;
        self.read_line()
    }

    pub fn read_line(&mut self) -> Result<String> {
        let mut out = String::new();
        if self.reader.read_line(&mut out)? == 0 {
            return Err(Error::Protocol("connection closed".into()));
        }
        Ok(out.trim_end().to_string())
    }

    pub fn command(&mut self, frame: &CommandFrame) -> Result<ResponseFrame> {
        Ok(serde_json::from_str(&self.send_line(&serde_json::to_string(frame)?)?)?)
    }

    pub fn gateway(&mut self, request: &Value) -> Result<Value> {
        Ok(serde_json::from_str(&self.send_line(&request.to_string())?)?)
    }

    pub fn next_stream_frame(&mut self) -> Result<StreamFrame> {
        Ok(serde_json::from_str(&self.read_line()?)?)
    }
}
