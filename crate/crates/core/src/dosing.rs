//! Prescriptions, dose scheduling and the safety gate that every delivery passes through.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::sync::Mutex;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pathway::{predict_window, CircadianProfile, HourWindow};
use crate::time::{LocalOffset, Timestamp, SECONDS_PER_DAY};

const VOLUME_TOL: f64 = 1e-9;

/// Local wall-clock time of day, written "HH:MM".
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct DoseTime {
    pub hour: u32,
    pub minute: u32,
}

impl DoseTime {
    pub fn new(hour: u32, minute: u32) -> Result<Self> {
        if hour > 23 || minute > 59 {
            return Err(Error::param(format!("invalid time of day {hour}:{minute}")));
        }
        Ok(DoseTime { hour, minute })
    }

    pub fn seconds(self) -> i64 {
        (self.hour as i64) * 3600 + (self.minute as i64) * 60
    }
}

impl fmt::Display for DoseTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:02}:{:02}", self.hour, self.minute)
    }
}

impl FromStr for DoseTime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (h, m) = s.split_once(':').ok_or_else(|| Error::param(format!("expected HH:MM, got `{s}`")))?;
        let parse = |v: &str| v.trim().parse::<u32>().map_err(|_| Error::param(format!("expected HH:MM, got `{s}`")));
        DoseTime::new(parse(h)?, parse(m)?)
    }
}

impl TryFrom<String> for DoseTime {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<DoseTime> for String {
    fn from(t: DoseTime) -> String {
        t.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DosingMode {
    PrescriptionBased,
    PredictionBased,
}

pub const PRESCRIPTION_VERSION: u32 = 1;

fn default_version() -> u32 {
    PRESCRIPTION_VERSION
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prescription {
    #[serde(default = "default_version")]
    pub version: u32,
    pub dose_ml: f64,
    pub max_doses_per_day: u32,
    pub min_interdose_interval_s: i64,
    pub daily_max_ml: f64,
    pub mode: DosingMode,
    #[serde(default)]
    pub fixed_times: Vec<DoseTime>,
    #[serde(default)]
    pub lead_time_s: i64,
}

impl Prescription {
    /// 5 mL three times a day at 08:00, 14:00 and 20:00, at least 6 h apart.
    pub fn canonical() -> Self {
        Prescription {
            version: PRESCRIPTION_VERSION,
            dose_ml: 5.0,
            max_doses_per_day: 3,
            min_interdose_interval_s: 6 * 3600,
            daily_max_ml: 15.0,
            mode: DosingMode::PrescriptionBased,
            fixed_times: vec![DoseTime { hour: 8, minute: 0 }, DoseTime { hour: 14, minute: 0 }, DoseTime {
                hour: 20,
                minute: 0,
            }],
            lead_time_s: 0,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let p: Prescription = serde_json::from_str(text)?;
        if p.version != PRESCRIPTION_VERSION {
            return Err(Error::param(format!("unsupported prescription version {}", p.version)));
        }
        Ok(p)
    }

    /// Parses and validates in one go.
    pub fn from_json_validated(text: &str) -> Result<Self> {
        let p = Prescription::from_json(text)?;
        validate_prescription(&p).map_err(Error::Prescription)?;
        Ok(p)
    }
}

/// One broken prescription or schedule rule, machine readable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "kebab-case")]
pub enum Violation {
    NonPositiveDose { dose_ml: f64 },
    NoDosesPerDay,
    NegativeInterval { min_interdose_interval_s: i64 },
    NegativeLeadTime { lead_time_s: i64 },
    DailyVolume { required_ml: f64, daily_max_ml: f64 },
    FixedTimesCount { expected: u32, found: usize },
    Spacing { first: String, second: String, gap_s: i64, min_s: i64 },
    DoseCount { planned: usize, max: u32 },
    OverBolus { ml: f64, dose_ml: f64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NonPositiveDose { dose_ml } => write!(f, "dose_ml {dose_ml} must be positive"),
            Violation::NoDosesPerDay => write!(f, "max_doses_per_day must be at least 1"),
            Violation::NegativeInterval { min_interdose_interval_s } => {
                write!(f, "min_interdose_interval_s {min_interdose_interval_s} is negative")
            }
            Violation::NegativeLeadTime { lead_time_s } => write!(f, "lead_time_s {lead_time_s} is negative"),
            Violation::DailyVolume { required_ml, daily_max_ml } => {
                write!(f, "{required_ml} mL per day exceeds daily max {daily_max_ml} mL")
            }
            Violation::FixedTimesCount { expected, found } => {
                write!(f, "{found} fixed times given, {expected} doses per day prescribed")
            }
            Violation::Spacing { first, second, gap_s, min_s } => {
                write!(f, "{first} to {second} is {gap_s} s, minimum {min_s} s")
            }
            Violation::DoseCount { planned, max } => write!(f, "{planned} doses planned, max {max}"),
            Violation::OverBolus { ml, dose_ml } => write!(f, "{ml} mL exceeds unit dose {dose_ml} mL"),
        }
    }
}

/// Circular spacing check over times of day, including the wrap into the next day.
fn spacing_violations(secs: &mut [(i64, String)], min_s: i64) -> Vec<Violation> {
    secs.sort();
    let n = secs.len();
    let mut out = Vec::new();
    for i in 0..n {
        let (a, ref la) = secs[i];
        let (b, ref lb) = secs[(i + 1) % n];
        let gap = if i + 1 < n { b - a } else { b + SECONDS_PER_DAY - a };
        if gap < min_s {
            out.push(Violation::Spacing { first: la.clone(), second: lb.clone(), gap_s: gap, min_s });
        }
    }
    out
}

pub fn validate_prescription(p: &Prescription) -> std::result::Result<(), Vec<Violation>> {
    let mut v = Vec::new();
    if !(p.dose_ml > 0.0) {
        v.push(Violation::NonPositiveDose { dose_ml: p.dose_ml });
    }
    if p.max_doses_per_day == 0 {
        v.push(Violation::NoDosesPerDay);
    }
    if p.min_interdose_interval_s < 0 {
        v.push(Violation::NegativeInterval { min_interdose_interval_s: p.min_interdose_interval_s });
    }
    if p.lead_time_s < 0 {
        v.push(Violation::NegativeLeadTime { lead_time_s: p.lead_time_s });
    }
    let required = p.dose_ml * p.max_doses_per_day as f64;
    if required > p.daily_max_ml + VOLUME_TOL {
        v.push(Violation::DailyVolume { required_ml: required, daily_max_ml: p.daily_max_ml });
    }
    if p.mode == DosingMode::PrescriptionBased {
        if p.fixed_times.len() != p.max_doses_per_day as usize {
            v.push(Violation::FixedTimesCount { expected: p.max_doses_per_day, found: p.fixed_times.len() });
        }
        let mut secs: Vec<_> = p.fixed_times.iter().map(|t| (t.seconds(), t.to_string())).collect();
        v.extend(spacing_violations(&mut secs, p.min_interdose_interval_s));
    }
    if v.is_empty() {
        Ok(())
    } else {
        Err(v)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlannedDose {
    pub ts: Timestamp,
    pub ml: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoseSchedule {
    pub day: NaiveDate,
    pub planned: Vec<PlannedDose>,
}

/// Checks a schedule against the count, volume, unit-dose and spacing limits,
/// treating it as repeating every day.
pub fn check_schedule(p: &Prescription, s: &DoseSchedule, offset: LocalOffset) -> Vec<Violation> {
    let mut v = Vec::new();
    if s.planned.len() > p.max_doses_per_day as usize {
        v.push(Violation::DoseCount { planned: s.planned.len(), max: p.max_doses_per_day });
    }
    let total: f64 = s.planned.iter().map(|d| d.ml).sum();
    if total > p.daily_max_ml + VOLUME_TOL {
        v.push(Violation::DailyVolume { required_ml: total, daily_max_ml: p.daily_max_ml });
    }
    for d in &s.planned {
        if d.ml > p.dose_ml + VOLUME_TOL {
            v.push(Violation::OverBolus { ml: d.ml, dose_ml: p.dose_ml });
        }
    }
    let mut secs: Vec<_> = s.planned.iter().map(|d| (offset.seconds_of_day(d.ts), offset.format_hm(d.ts))).collect();
    if !secs.is_empty() {
        v.extend(spacing_violations(&mut secs, p.min_interdose_interval_s));
    }
    v
}

fn ensure_valid(p: &Prescription) -> Result<()> {
    validate_prescription(p).map_err(Error::Prescription)
}

pub fn schedule_prescription(p: &Prescription, day: NaiveDate, offset: LocalOffset) -> Result<DoseSchedule> {
    ensure_valid(p)?;
    if p.mode != DosingMode::PrescriptionBased {
        return Err(Error::Mode("fixed-time scheduling needs a PrescriptionBased prescription".into()));
    }
    let mut times = p.fixed_times.clone();
    times.sort();
    let planned = times
        .iter()
        .map(|t| PlannedDose { ts: offset.at(day, t.hour, t.minute), ml: p.dose_ml })
        .collect();
    Ok(DoseSchedule { day, planned })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictiveConfig {
    pub window_width_h: usize,
    pub min_support: usize,
}

impl Default for PredictiveConfig {
    fn default() -> Self {
        PredictiveConfig { window_width_h: 2, min_support: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum PredictiveOutcome {
    Scheduled { schedule: DoseSchedule, window: HourWindow },
    /// The profile cannot support a prediction; use the fixed times instead.
    Fallback { reason: String },
}

fn circular_gap(a: i64, b: i64) -> i64 {
    let d = (a - b).rem_euclid(SECONDS_PER_DAY);
    d.min(SECONDS_PER_DAY - d)
}

/// First dose `lead_time_s` before the predicted window, clamped at local midnight.
/// Further doses go before the next highest-mass hours outside the window while
/// spacing allows, up to the daily count.
pub fn schedule_predictive(
    p: &Prescription,
    profile: &CircadianProfile,
    day: NaiveDate,
    offset: LocalOffset,
    cfg: &PredictiveConfig,
) -> Result<PredictiveOutcome> {
    ensure_valid(p)?;
    if p.mode != DosingMode::PredictionBased {
        return Err(Error::Mode("predictive scheduling needs a PredictionBased prescription".into()));
    }
    let window = match predict_window(profile, cfg.window_width_h, cfg.min_support) {
        Ok(w) => w,
        Err(Error::InsufficientData(reason)) => return Ok(PredictiveOutcome::Fallback { reason }),
        Err(e) => return Err(e),
    };
    let lead = |hour: usize| (hour as i64 * 3600 - p.lead_time_s).max(0);
    let mut chosen = vec![lead(window.start_hour)];

    let mut rest: Vec<usize> = (0..24).filter(|&h| !window.contains(h) && profile.hourly_mass[h] > 0.0).collect();
    rest.sort_by(|&a, &b| profile.hourly_mass[b].total_cmp(&profile.hourly_mass[a]).then(a.cmp(&b)));
    for h in rest {
        if chosen.len() >= p.max_doses_per_day as usize {
            break;
        }
        let t = lead(h);
        if chosen.iter().all(|&c| circular_gap(c, t) >= p.min_interdose_interval_s) {
            chosen.push(t);
        }
    }
    chosen.sort_unstable();
    let midnight = offset.midnight(day);
    let schedule = DoseSchedule {
        day,
        planned: chosen.into_iter().map(|s| PlannedDose { ts: midnight + s, ml: p.dose_ml }).collect(),
    };
    let v = check_schedule(p, &schedule, offset);
    if !v.is_empty() {
        return Err(Error::Prescription(v));
    }
    Ok(PredictiveOutcome::Scheduled { schedule, window })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Delivery {
    pub ts: Timestamp,
    pub ml: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafetyState {
    pub offset: LocalOffset,
    /// Local midnight opening the day `delivered_today` belongs to.
    pub day_boundary: Timestamp,
    pub delivered_today: Vec<Delivery>,
    pub last_dose_ts: Option<Timestamp>,
}

impl SafetyState {
    pub fn new(offset: LocalOffset, now: Timestamp) -> Self {
        SafetyState {
            offset,
            day_boundary: offset.midnight(offset.day(now)),
            delivered_today: Vec::new(),
            last_dose_ts: None,
        }
    }

    /// Deliveries that fall on the same local day as `now`.
    pub fn today(&self, now: Timestamp) -> &[Delivery] {
        if now >= self.day_boundary && now < self.day_boundary + SECONDS_PER_DAY {
            &self.delivered_today
        } else {
            &[]
        }
    }

    pub fn delivered_ml(&self, now: Timestamp) -> f64 {
        self.today(now).iter().map(|d| d.ml).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoseRequest {
    pub id: String,
    pub ml: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SafetyRule {
    InvalidRequest,
    MaxDosesPerDay,
    MinInterval,
    DailyMaxVolume,
    OverBolus,
}

impl SafetyRule {
    pub fn name(self) -> &'static str {
        match self {
            SafetyRule::InvalidRequest => "invalid-request",
            SafetyRule::MaxDosesPerDay => "max-doses-per-day",
            SafetyRule::MinInterval => "min-interval",
            SafetyRule::DailyMaxVolume => "daily-max-volume",
            SafetyRule::OverBolus => "over-bolus",
        }
    }
}

impl fmt::Display for SafetyRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "decision", rename_all = "snake_case")]
pub enum Decision {
    Authorized,
    Rejected { rule: SafetyRule, detail: String },
}

impl Decision {
    pub fn is_authorized(&self) -> bool {
        matches!(self, Decision::Authorized)
    }
}

/// Pure decision. Rules are checked in a fixed order and the first failure is reported.
pub fn authorize_dose(s: &SafetyState, p: &Prescription, req: &DoseRequest, now: Timestamp) -> Decision {
    let reject = |rule, detail: String| Decision::Rejected { rule, detail };
    if !(req.ml > 0.0) || !req.ml.is_finite() {
        return reject(SafetyRule::InvalidRequest, format!("requested {} mL", req.ml));
    }
    let today = s.today(now);
    if today.len() >= p.max_doses_per_day as usize {
        return reject(SafetyRule::MaxDosesPerDay, format!("{} of {} doses already given today", today.len(), p.max_doses_per_day));
    }
    if let Some(last) = s.last_dose_ts {
        if now - last < p.min_interdose_interval_s {
            return reject(
                SafetyRule::MinInterval,
                format!("{} s since last dose, minimum {} s", now - last, p.min_interdose_interval_s),
            );
        }
    }
    let given: f64 = today.iter().map(|d| d.ml).sum();
    if given + req.ml > p.daily_max_ml + VOLUME_TOL {
        return reject(
            SafetyRule::DailyMaxVolume,
            format!("{given} mL given today + {} mL exceeds {} mL", req.ml, p.daily_max_ml),
        );
    }
    if req.ml > p.dose_ml + VOLUME_TOL {
        return reject(SafetyRule::OverBolus, format!("{} mL exceeds unit dose {} mL", req.ml, p.dose_ml));
    }
    Decision::Authorized
}

/// Appends a delivery, rolling the daily ledger over at local midnight.
pub fn record_delivery(s: &SafetyState, d: Delivery) -> Result<SafetyState> {
    let mut next = s.clone();
    if let Some(last) = s.last_dose_ts {
        if d.ts < last {
            return Err(Error::Ordering { ts: d.ts, last });
        }
    }
    if d.ts >= next.day_boundary + SECONDS_PER_DAY || d.ts < next.day_boundary {
        next.day_boundary = s.offset.midnight(s.offset.day(d.ts));
        next.delivered_today.clear();
    }
    next.delivered_today.push(d);
    next.last_dose_ts = Some(d.ts);
    Ok(next)
}

/// One line of the authorization audit log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub ts: Timestamp,
    pub request_id: String,
    pub ml: f64,
    #[serde(flatten)]
    pub decision: Decision,
}

struct GateInner {
    state: SafetyState,
    prescription: Prescription,
    decisions: Vec<DecisionRecord>,
    sink: Option<Box<dyn Write + Send>>,
}

/// Serializes authorize-then-record so concurrent callers cannot double-spend
/// the daily budget. Every decision is kept and optionally streamed as JSON lines.
pub struct SafetyGate {
    inner: Mutex<GateInner>,
}

impl SafetyGate {
    pub fn new(prescription: Prescription, offset: LocalOffset, now: Timestamp) -> Result<Self> {
        ensure_valid(&prescription)?;
        Ok(SafetyGate {
            inner: Mutex::new(GateInner {
                state: SafetyState::new(offset, now),
                prescription,
                decisions: Vec::new(),
                sink: None,
            }),
        })
    }

    pub fn with_audit_sink(self, sink: Box<dyn Write + Send>) -> Self {
        self.lock().sink = Some(sink);
        self
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, GateInner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Decides and, when granted, books the requested volume before releasing the lock.
    pub fn authorize_and_record(&self, req: &DoseRequest, now: Timestamp) -> Result<Decision> {
        let mut g = self.lock();
        let decision = authorize_dose(&g.state, &g.prescription, req, now);
        if decision.is_authorized() {
            g.state = record_delivery(&g.state, Delivery { ts: now, ml: req.ml })?;
        }
        let rec = DecisionRecord { ts: now, request_id: req.id.clone(), ml: req.ml, decision: decision.clone() };
        if let Some(sink) = g.sink.as_mut() {
            writeln!(sink, "{}", serde_json::to_string(&rec)?)?;
            sink.flush()?;
        }
        g.decisions.push(rec);
        Ok(decision)
    }

    pub fn state(&self) -> SafetyState {
        self.lock().state.clone()
    }

    pub fn prescription(&self) -> Prescription {
        self.lock().prescription.clone()
    }

    pub fn set_prescription(&self, p: Prescription) -> Result<()> {
        ensure_valid(&p)?;
        self.lock().prescription = p;
        Ok(())
    }

    pub fn decisions(&self) -> Vec<DecisionRecord> {
        self.lock().decisions.clone()
    }
}
