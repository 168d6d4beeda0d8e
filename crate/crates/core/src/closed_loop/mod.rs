//! End-to-end loop: simulated sensor windows through detection, the pathway,
//! dose scheduling, authorization and the pump, all recorded in a replayable
//! audit log. A simulated clock drives every timestamp.

mod audit;
mod replay;

pub use audit::{
    AuditBody, AuditHeader, AuditLog, AuditRecord, DeliveryRecord, FaultRecord, PlanBasis, PlanRecord,
    PlannedEntry, TransitionCause, TransitionRecord, AUDIT_VERSION,
};
pub use replay::{replay, Divergence, Verdict};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{load_checkpoint, softmax, Model};
use crate::dosing::{
    schedule_predictive, schedule_prescription, validate_prescription, DoseTime, DosingMode, PredictiveConfig,
    PredictiveOutcome, Prescription, SafetyGate,
};
use crate::error::{Error, Result};
use crate::pathway::{
    circadian_profile, generate_report, CircadianProfile, DetectionEvent, EpisodeLog, Pathway, PathwayConfig,
    PathwayEvent, PatientRecord, Report, SignalSource, Stage,
};
use crate::pump::{CommandFrame, Device, DeviceConfig, GateAuthorizer, PumpGeometry, PumpState};
use crate::signal_sim::{
    derive_seed, gen_rr_segment, inject_artifacts, rr_to_waveform, ArtifactConfig, Channel, RhythmClass, SimConfig,
};
use crate::spectro::{SpectroConfig, Spectrogrammer, Window};
use crate::time::{LocalOffset, SimClock, Timestamp, SECONDS_PER_DAY};

pub const LOOP_CONFIG_VERSION: u32 = 1;

/// A rhythm the simulated patient falls into at the same local time every day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScriptedEpisode {
    pub class: RhythmClass,
    pub hour: u32,
    pub minute: u32,
    pub duration_s: i64,
    /// Zero-based scenario day of the first occurrence.
    pub first_day: u32,
    pub last_day: Option<u32>,
}

impl Default for ScriptedEpisode {
    fn default() -> Self {
        ScriptedEpisode { class: RhythmClass::AFib, hour: 3, minute: 0, duration_s: 600, first_day: 0, last_day: None }
    }
}

/// How often the wearable records. Each segment is cut into classifier windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Monitoring {
    pub segment_every_s: i64,
    pub segment_s: i64,
    /// Delay between the screening trigger and the ECG reading.
    pub ecg_delay_s: i64,
    /// Corruption applied to every synthesized window, if any.
    pub artifacts: Option<ArtifactConfig>,
}

impl Default for Monitoring {
    fn default() -> Self {
        Monitoring { segment_every_s: 900, segment_s: 60, ecg_delay_s: 5, artifacts: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DetectorConfig {
    /// Reports the simulated ground truth with a fixed confidence.
    Oracle { confidence: f64 },
    /// Binary PPG and four-class ECG checkpoints.
    Cnn { ppg_checkpoint: PathBuf, ecg_checkpoint: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ClockConfig {
    RealTime,
    /// Simulated seconds per wall second; `None` runs as fast as possible.
    Accelerated {
        #[serde(default)]
        factor: Option<f64>,
    },
}

impl ClockConfig {
    fn factor(&self) -> Option<f64> {
        match self {
            ClockConfig::RealTime => Some(1.0),
            ClockConfig::Accelerated { factor } => *factor,
        }
    }
}

/// The whole scenario in one document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoopConfig {
    pub version: u32,
    pub seed: u64,
    pub patient: PatientRecord,
    pub start_day: NaiveDate,
    pub days: u32,
    pub episodes: Vec<ScriptedEpisode>,
    pub monitoring: Monitoring,
    pub sim: SimConfig,
    /// Morlet parameters and windowing.
    pub spectro: SpectroConfig,
    pub detector: DetectorConfig,
    pub pathway: PathwayConfig,
    pub prescription: Prescription,
    pub predictive: PredictiveConfig,
    /// Scripted clinician steps, measured from entry into the preceding stage.
    pub report_after_s: i64,
    pub prescription_after_s: i64,
    pub geometry: PumpGeometry,
    pub device: DeviceConfig,
    pub clock: ClockConfig,
    /// Puts the pump into Fault this many seconds after the start.
    pub pump_fault_after_s: Option<i64>,
}

/// 0.5 mL up to twice a day, 8 h apart, 30 min ahead of the predicted window.
/// Falls back to 08:00 and 16:00 until the profile has enough support.
pub fn nightly_prescription() -> Prescription {
    Prescription {
        version: crate::dosing::PRESCRIPTION_VERSION,
        dose_ml: 0.5,
        max_doses_per_day: 2,
        min_interdose_interval_s: 8 * 3600,
        daily_max_ml: 1.0,
        mode: DosingMode::PredictionBased,
        fixed_times: vec![DoseTime { hour: 8, minute: 0 }, DoseTime { hour: 16, minute: 0 }],
        lead_time_s: 1800,
    }
}

impl Default for LoopConfig {
    fn default() -> Self {
        LoopConfig {
            version: LOOP_CONFIG_VERSION,
            seed: 0,
            patient: PatientRecord { patient_id: "sim-001".into(), ..PatientRecord::default() },
            start_day: NaiveDate::from_ymd_opt(2024, 1, 1).expect("valid date"),
            days: 7,
            episodes: vec![ScriptedEpisode::default()],
            monitoring: Monitoring::default(),
            sim: SimConfig::default(),
            spectro: SpectroConfig::default(),
            detector: DetectorConfig::Oracle { confidence: 0.95 },
            pathway: PathwayConfig::default(),
            prescription: nightly_prescription(),
            predictive: PredictiveConfig::default(),
            report_after_s: 12 * 3600,
            prescription_after_s: 12 * 3600,
            geometry: PumpGeometry::default(),
            device: DeviceConfig::default(),
            clock: ClockConfig::Accelerated { factor: None },
            pump_fault_after_s: None,
        }
    }
}

fn whole_seconds(x: f64, what: &str) -> Result<i64> {
    if !(x >= 1.0) || x.fract() != 0.0 {
        return Err(Error::param(format!("{what} must be a whole number of seconds >= 1, got {x}")));
    }
    Ok(x as i64)
}

impl LoopConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: LoopConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a scenario file; checkpoint paths are taken relative to its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = LoopConfig::from_json(&std::fs::read_to_string(path)?)?;
        cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        if let DetectorConfig::Cnn { ppg_checkpoint, ecg_checkpoint } = &mut self.detector {
            for p in [ppg_checkpoint, ecg_checkpoint] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != LOOP_CONFIG_VERSION {
            return Err(Error::param(format!("unsupported scenario version {}", self.version)));
        }
        if self.days == 0 {
            return Err(Error::param("scenario needs at least one day"));
        }
        for e in &self.episodes {
            if e.hour > 23 || e.minute > 59 || e.duration_s <= 0 {
                return Err(Error::param(format!("bad scripted episode at {:02}:{:02}", e.hour, e.minute)));
            }
        }
        self.sim.validate()?;
        self.spectro.morlet.validate()?;
        let window = whole_seconds(self.spectro.window_s, "window_s")?;
        let stride = whole_seconds(self.spectro.stride_s, "stride_s")?;
        let m = &self.monitoring;
        if m.segment_s < window || m.segment_every_s < m.segment_s {
            return Err(Error::param("need window_s <= segment_s <= segment_every_s"));
        }
        if m.segment_every_s % stride != 0 {
            return Err(Error::param("segment_every_s must be a multiple of stride_s"));
        }
        // keeps ECG readings off the PPG time grid
        if !(0 < m.ecg_delay_s && m.ecg_delay_s < stride) {
            return Err(Error::param("ecg_delay_s must lie strictly between 0 and stride_s"));
        }
        if let Some(a) = &m.artifacts {
            a.validate()?;
        }
        if let DetectorConfig::Oracle { confidence } = self.detector {
            if !(0.0..=1.0).contains(&confidence) {
                return Err(Error::param("oracle confidence outside [0,1]"));
            }
        }
        validate_prescription(&self.prescription).map_err(Error::Prescription)?;
        if self.report_after_s < 0 || self.prescription_after_s < 0 {
            return Err(Error::param("scripted delays must be non-negative"));
        }
        self.geometry.validate()?;
        if let Some(f) = self.clock.factor() {
            if !(f >= 1.0) || !f.is_finite() {
                return Err(Error::param(format!("clock factor {f} must be >= 1")));
            }
        }
        Ok(())
    }

    pub fn offset(&self) -> LocalOffset {
        self.patient.utc_offset
    }

    pub fn start_ts(&self) -> Timestamp {
        self.offset().midnight(self.start_day)
    }

    pub fn end_ts(&self) -> Timestamp {
        self.start_ts() + self.days as i64 * SECONDS_PER_DAY
    }

    /// Scripted rhythm at `ts`; NSR outside every episode.
    pub fn rhythm_at(&self, ts: Timestamp) -> RhythmClass {
        let offset = self.offset();
        let day = (ts - self.start_ts()).div_euclid(SECONDS_PER_DAY);
        let sod = offset.seconds_of_day(ts);
        for e in &self.episodes {
            let start = e.hour as i64 * 3600 + e.minute as i64 * 60;
            // an episode may run past midnight into the next scenario day
            for (d, s) in [(day, sod), (day - 1, sod + SECONDS_PER_DAY)] {
                let active = d >= e.first_day as i64 && e.last_day.is_none_or(|l| d <= l as i64);
                if active && s >= start && s < start + e.duration_s {
                    return e.class;
                }
            }
        }
        RhythmClass::Nsr
    }
}

/// Maps one signal window to a predicted class and its confidence.
pub trait Detector {
    fn classify(&self, w: &Window) -> Result<(RhythmClass, f64)>;
}

/// Ground truth, for scenarios that should not depend on a trained model.
pub struct OracleDetector {
    pub confidence: f64,
}

impl Detector for OracleDetector {
    fn classify(&self, w: &Window) -> Result<(RhythmClass, f64)> {
        Ok((w.label, self.confidence))
    }
}

pub struct CnnDetector {
    model: Model,
    spectro: Spectrogrammer,
}

impl CnnDetector {
    pub fn new(model: Model, cfg: &SpectroConfig, channel: Channel, fs: f64) -> Result<Self> {
        model.validate()?;
        if cfg.height != model.input_size || cfg.width != model.input_size {
            return Err(Error::Shape(format!(
                "images are {}x{} but the model expects {}x{}",
                cfg.height, cfg.width, model.input_size, model.input_size
            )));
        }
        Ok(CnnDetector { spectro: Spectrogrammer::new(cfg, channel, fs)?, model })
    }
}

impl Detector for CnnDetector {
    fn classify(&self, w: &Window) -> Result<(RhythmClass, f64)> {
        let img = self.spectro.image(&w.samples, None)?;
        let probs = softmax(&self.model.logits(&img)?);
        let (best, p) = probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .ok_or_else(|| Error::Shape("model has no classes".into()))?;
        Ok((self.model.classes[best], p.clamp(0.0, 1.0)))
    }
}

/// Builds the PPG and ECG detectors named by the scenario.
pub fn build_detectors(cfg: &LoopConfig) -> Result<(Box<dyn Detector>, Box<dyn Detector>)> {
    match &cfg.detector {
        DetectorConfig::Oracle { confidence } => {
            Ok((Box::new(OracleDetector { confidence: *confidence }), Box::new(OracleDetector { confidence: *confidence })))
        }
        DetectorConfig::Cnn { ppg_checkpoint, ecg_checkpoint } => {
            let ppg = CnnDetector::new(load_checkpoint(ppg_checkpoint)?, &cfg.spectro, Channel::Ppg, cfg.sim.fs_ppg)?;
            let ecg =
                CnnDetector::new(load_checkpoint(ecg_checkpoint)?, &cfg.spectro, Channel::EcgLeadI, cfg.sim.fs_ecg)?;
            Ok((Box::new(ppg), Box::new(ecg)))
        }
    }
}

/// The day's doses from the prescription and the current profile. Prediction
/// based prescriptions fall back to their fixed times while support is thin.
pub fn plan_day(
    p: &Prescription,
    profile: &CircadianProfile,
    day: NaiveDate,
    offset: LocalOffset,
    cfg: &PredictiveConfig,
) -> Result<PlanRecord> {
    let entries = |planned: &[crate::dosing::PlannedDose]| {
        planned
            .iter()
            .enumerate()
            .map(|(k, d)| PlannedEntry { id: format!("dose-{day}-{k}"), ts: d.ts, ml: d.ml })
            .collect::<Vec<_>>()
    };
    let plan = |basis, window, reason, doses| PlanRecord { day, basis, window, reason, doses };
    match p.mode {
        DosingMode::PrescriptionBased => {
            let s = schedule_prescription(p, day, offset)?;
            Ok(plan(PlanBasis::Fixed, None, None, entries(&s.planned)))
        }
        DosingMode::PredictionBased => match schedule_predictive(p, profile, day, offset, cfg)? {
            PredictiveOutcome::Scheduled { schedule, window } => {
                Ok(plan(PlanBasis::Predictive, Some(window), None, entries(&schedule.planned)))
            }
            PredictiveOutcome::Fallback { reason } if p.fixed_times.is_empty() => {
                Ok(plan(PlanBasis::Empty, None, Some(reason), Vec::new()))
            }
            PredictiveOutcome::Fallback { reason } => {
                let fixed = Prescription { mode: DosingMode::PrescriptionBased, ..p.clone() };
                match schedule_prescription(&fixed, day, offset) {
                    Ok(s) => Ok(plan(PlanBasis::Fallback, None, Some(reason), entries(&s.planned))),
                    Err(e) => Ok(plan(PlanBasis::Empty, None, Some(format!("{reason}; fixed times unusable: {e}")), Vec::new())),
                }
            }
        },
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopOutcome {
    pub audit: AuditLog,
    pub final_stage: Stage,
    pub final_pump: PumpState,
    pub deliveries: usize,
    /// Why the loop stopped early, if it did.
    pub halted: Option<String>,
    /// Clinical report produced when data collection completed.
    pub report: Option<Report>,
}

pub fn run_closed_loop(cfg: &LoopConfig) -> Result<LoopOutcome> {
    let (ppg, ecg) = build_detectors(cfg)?;
    run_with_detectors(cfg, ppg.as_ref(), ecg.as_ref())
}

#[derive(Debug, Clone)]
enum Ev {
    Plan(NaiveDate),
    ReportComplete,
    PrescriptionIssued,
    PumpFault,
    Dose(PlannedEntry),
    Ecg,
    PpgWindow,
}

impl Ev {
    /// Tie-break for events sharing a timestamp.
    fn rank(&self) -> u8 {
        match self {
            Ev::Plan(_) => 0,
            Ev::ReportComplete | Ev::PrescriptionIssued => 1,
            Ev::PumpFault => 2,
            Ev::Dose(_) => 3,
            Ev::Ecg => 4,
            Ev::PpgWindow => 5,
        }
    }

    fn component(&self) -> &'static str {
        match self {
            Ev::Plan(_) => "scheduler",
            Ev::ReportComplete | Ev::PrescriptionIssued => "pathway",
            Ev::PumpFault | Ev::Dose(_) => "pump",
            Ev::Ecg | Ev::PpgWindow => "detector",
        }
    }
}

struct Runner<'a> {
    cfg: &'a LoopConfig,
    ppg: &'a dyn Detector,
    ecg: &'a dyn Detector,
    clock: SimClock,
    gate: Arc<SafetyGate>,
    device: Device,
    pathway: Pathway,
    episodes: EpisodeLog,
    audit: AuditLog,
    queue: BTreeMap<(Timestamp, u8, u64), Ev>,
    next_id: u64,
    window_s: i64,
    deliveries: usize,
    report: Option<Report>,
}

/// Runs the scenario with caller-supplied detectors, e.g. models already in memory.
pub fn run_with_detectors(cfg: &LoopConfig, ppg: &dyn Detector, ecg: &dyn Detector) -> Result<LoopOutcome> {
    cfg.validate()?;
    let start = cfg.start_ts();
    let clock = SimClock::simulated(start);
    let gate = Arc::new(SafetyGate::new(cfg.prescription.clone(), cfg.offset(), start)?);
    let auth = Arc::new(GateAuthorizer { gate: gate.clone(), clock: clock.clone() });
    let device = Device::new(cfg.geometry.clone(), cfg.device.clone(), auth)?;
    let mut r = Runner {
        cfg,
        ppg,
        ecg,
        pathway: Pathway::new(cfg.patient.patient_id.clone(), start, cfg.pathway.clone()),
        episodes: EpisodeLog::new(cfg.pathway.merge_gap_s),
        audit: AuditLog::new(),
        queue: BTreeMap::new(),
        next_id: 0,
        window_s: cfg.spectro.window_s as i64,
        deliveries: 0,
        report: None,
        clock,
        gate,
        device,
    };
    r.audit.push(
        start,
        AuditBody::Header(AuditHeader {
            patient_id: cfg.patient.patient_id.clone(),
            utc_offset: cfg.offset(),
            start_ts: start,
            end_ts: cfg.end_ts(),
            seed: cfg.seed,
            prescription: cfg.prescription.clone(),
            predictive: cfg.predictive.clone(),
            pathway: cfg.pathway.clone(),
            geometry: cfg.geometry.clone(),
        }),
    )?;
    r.seed_queue();
    let halted = r.drive();
    Ok(LoopOutcome {
        final_stage: r.pathway.state.stage,
        final_pump: r.device.state(),
        deliveries: r.deliveries,
        halted,
        report: r.report,
        audit: r.audit,
    })
}

impl Runner<'_> {
    fn schedule(&mut self, ts: Timestamp, ev: Ev) {
        if ts < self.cfg.end_ts() {
            self.queue.insert((ts, ev.rank(), self.next_id), ev);
            self.next_id += 1;
        }
    }

    fn seed_queue(&mut self) {
        let m = &self.cfg.monitoring;
        let stride = self.cfg.spectro.stride_s as i64;
        let per_segment = (m.segment_s - self.window_s) / stride + 1;
        let mut seg = self.cfg.start_ts();
        while seg < self.cfg.end_ts() {
            for k in 0..per_segment {
                // stamped when the window is complete
                self.schedule(seg + k * stride + self.window_s, Ev::PpgWindow);
            }
            seg += m.segment_every_s;
        }
        if let Some(after) = self.cfg.pump_fault_after_s {
            self.schedule(self.cfg.start_ts() + after, Ev::PumpFault);
        }
    }

    /// Processes events in time order until the end or the first failure.
    fn drive(&mut self) -> Option<String> {
        let factor = self.cfg.clock.factor();
        let mut last = self.cfg.start_ts();
        while let Some(((ts, _, _), ev)) = self.queue.pop_first() {
            if let Some(f) = factor {
                std::thread::sleep(Duration::from_secs_f64((ts - last).max(0) as f64 / f));
            }
            last = ts;
            self.clock.advance_to(ts);
            let component = ev.component();
            let outcome = match self.handle(ts, ev) {
                Ok(None) => continue,
                Ok(Some(msg)) => msg,
                Err(e) => e.to_string(),
            };
            let rec = FaultRecord { component: component.into(), message: outcome.clone() };
            // the log is already time ordered, so this push cannot fail
            let _ = self.audit.push(ts, AuditBody::Fault(rec));
            return Some(format!("{component}: {outcome}"));
        }
        None
    }

    /// `Ok(Some(_))` is a failure that halts the loop without being an error.
    fn handle(&mut self, ts: Timestamp, ev: Ev) -> Result<Option<String>> {
        match ev {
            Ev::PpgWindow => {
                let w = self.synth_window(Channel::Ppg, ts - self.window_s)?;
                let (class, conf) = self.ppg.classify(&w)?;
                self.on_detection(DetectionEvent::new(ts, SignalSource::Ppg, class, conf)?)?;
            }
            Ev::Ecg => {
                let w = self.synth_window(Channel::EcgLeadI, ts - self.window_s)?;
                let (class, conf) = self.ecg.classify(&w)?;
                self.on_detection(DetectionEvent::new(ts, SignalSource::Ecg, class, conf)?)?;
            }
            Ev::ReportComplete => {
                self.report = Some(generate_report(&self.cfg.patient, &self.pathway.state, &self.episodes, ts)?);
                self.step(ts, &PathwayEvent::ReportComplete { ts }, TransitionCause::ReportComplete)?;
            }
            Ev::PrescriptionIssued => {
                self.step(ts, &PathwayEvent::PrescriptionIssued { ts }, TransitionCause::PrescriptionIssued)?;
            }
            Ev::Plan(day) => self.plan(ts, day)?,
            Ev::PumpFault => {
                self.device.inject_fault();
                return Ok(Some("device reported a fault".into()));
            }
            Ev::Dose(entry) => return self.dose(ts, entry),
        }
        Ok(None)
    }

    /// A window of the scripted rhythm ending at `start + window_s`, cut from a
    /// slightly longer synthetic strip so it does not begin on a beat.
    fn synth_window(&self, channel: Channel, start: Timestamp) -> Result<Window> {
        let class = self.cfg.rhythm_at(start + self.window_s / 2);
        let fs = self.cfg.sim.fs_for(channel);
        let stream = match channel {
            Channel::Ppg => 1,
            Channel::EcgLeadI => 2,
        };
        let seed = derive_seed(self.cfg.seed, stream, start as u64);
        let lead_in = ChaCha8Rng::seed_from_u64(seed).random_range(0.0..2.0);
        let rr = gen_rr_segment(class, self.window_s as f64 + lead_in + 1.0, &self.cfg.sim.class_rate_params, seed)?;
        let mut wave = rr_to_waveform(&rr, channel, fs)?;
        if let Some(a) = &self.cfg.monitoring.artifacts {
            wave = inject_artifacts(&wave, a, seed ^ 0xA57)?;
        }
        let origin = (lead_in * fs).round() as usize;
        let n = (self.window_s as f64 * fs).round() as usize;
        let samples = wave
            .samples
            .get(origin..origin + n)
            .ok_or_else(|| Error::Shape(format!("synthesized strip shorter than {n} samples")))?
            .to_vec();
        Ok(Window { origin: 0, fs, channel, samples, label: class })
    }

    fn on_detection(&mut self, d: DetectionEvent) -> Result<()> {
        let ts = d.ts;
        self.audit.push(ts, AuditBody::Detection(d.clone()))?;
        self.episodes.log(d.clone())?;
        self.step(ts, &PathwayEvent::Detection(d), TransitionCause::Detection)
    }

    fn step(&mut self, ts: Timestamp, e: &PathwayEvent, cause: TransitionCause) -> Result<()> {
        let from = self.pathway.state.stage;
        let Some(to) = self.pathway.apply(e)? else {
            return Ok(());
        };
        self.audit.push(ts, AuditBody::Transition(TransitionRecord { from, to, cause }))?;
        match to {
            Stage::EcgConfirm => self.schedule(ts + self.cfg.monitoring.ecg_delay_s, Ev::Ecg),
            Stage::DataCollection => self.schedule(ts + self.cfg.report_after_s, Ev::ReportComplete),
            Stage::ClinicianReview => self.schedule(ts + self.cfg.prescription_after_s, Ev::PrescriptionIssued),
            Stage::TimedDelivery => {
                let offset = self.cfg.offset();
                let today = offset.day(ts);
                self.plan(ts, today)?;
                let mut day = today.succ_opt().expect("date in range");
                while offset.midnight(day) < self.cfg.end_ts() {
                    self.schedule(offset.midnight(day), Ev::Plan(day));
                    day = day.succ_opt().expect("date in range");
                }
            }
            Stage::Screening => {}
        }
        Ok(())
    }

    /// Plans `day` and queues the doses that are still ahead of `now`.
    fn plan(&mut self, now: Timestamp, day: NaiveDate) -> Result<()> {
        let profile = circadian_profile(&self.episodes, self.cfg.offset());
        let plan = plan_day(&self.cfg.prescription, &profile, day, self.cfg.offset(), &self.cfg.predictive)?;
        for d in plan.doses.iter().filter(|d| d.ts >= now) {
            self.schedule(d.ts, Ev::Dose(d.clone()));
        }
        self.audit.push(now, AuditBody::Schedule(plan))?;
        Ok(())
    }

    /// Sends DELIVER over the wire format. A safety rejection is logged and the
    /// loop carries on; any other pump error halts it.
    fn dose(&mut self, ts: Timestamp, entry: PlannedEntry) -> Result<Option<String>> {
        let before = self.gate.decisions().len();
        let frame = serde_json::to_string(&CommandFrame::deliver(entry.id.clone(), entry.ml))?;
        let resp = self.device.handle_line(&frame);
        let decisions = self.gate.decisions();
        for d in &decisions[before..] {
            self.audit.push(ts, AuditBody::Authorization(d.clone()))?;
        }
        if resp.ok {
            let state = self.device.state();
            self.audit.push(
                ts,
                AuditBody::Delivery(DeliveryRecord {
                    request_id: entry.id,
                    steps: resp.steps.unwrap_or(0),
                    delivered_ml: resp.delivered_ml.unwrap_or(0.0),
                    position_steps: state.position_steps,
                    remaining_ml: state.remaining_ml,
                    status: state.status,
                }),
            )?;
            self.deliveries += 1;
            return Ok(None);
        }
        if decisions.len() > before {
            return Ok(None);
        }
        Ok(Some(format!("DELIVER {} failed: {}", entry.id, resp.error.unwrap_or_default())))
    }
}
