//! Patient pathway: screening state machine, episode log, circadian profile,
//! risk scores and the clinical report.

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal_sim::RhythmClass;
use crate::time::{LocalOffset, Timestamp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    Screening,
    EcgConfirm,
    DataCollection,
    ClinicianReview,
    TimedDelivery,
}

impl Stage {
    pub const ALL: [Stage; 5] =
        [Stage::Screening, Stage::EcgConfirm, Stage::DataCollection, Stage::ClinicianReview, Stage::TimedDelivery];
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathwayState {
    pub stage: Stage,
    pub entered_at: Timestamp,
    pub patient_id: String,
}

impl PathwayState {
    pub fn new(patient_id: impl Into<String>, now: Timestamp) -> Self {
        PathwayState { stage: Stage::Screening, entered_at: now, patient_id: patient_id.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SignalSource {
    #[serde(rename = "PPG")]
    Ppg,
    #[serde(rename = "ECG")]
    Ecg,
}

/// One classifier output. The wire form is `{ts, source, class, confidence}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionEvent {
    pub ts: Timestamp,
    pub source: SignalSource,
    #[serde(rename = "class")]
    pub predicted: RhythmClass,
    pub confidence: f64,
}

impl DetectionEvent {
    pub fn new(ts: Timestamp, source: SignalSource, predicted: RhythmClass, confidence: f64) -> Result<Self> {
        let e = DetectionEvent { ts, source, predicted, confidence };
        e.validate()?;
        Ok(e)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(Error::param(format!("confidence {} outside [0,1]", self.confidence)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum PathwayEvent {
    Detection(DetectionEvent),
    ReportComplete { ts: Timestamp },
    PrescriptionIssued { ts: Timestamp },
}

impl PathwayEvent {
    pub fn ts(&self) -> Timestamp {
        match self {
            PathwayEvent::Detection(d) => d.ts,
            PathwayEvent::ReportComplete { ts } | PathwayEvent::PrescriptionIssued { ts } => *ts,
        }
    }

    fn name(&self) -> String {
        match self {
            PathwayEvent::Detection(d) => format!("{:?} {} detection", d.source, d.predicted),
            PathwayEvent::ReportComplete { .. } => "report-complete".into(),
            PathwayEvent::PrescriptionIssued { .. } => "prescription-issued".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathwayConfig {
    /// Minimum PPG confidence that counts toward the screening trigger.
    pub trigger_confidence: f64,
    /// Consecutive qualifying PPG windows needed before asking for an ECG.
    pub trigger_windows: usize,
    pub merge_gap_s: i64,
    /// Episodes needed before the circadian profile is trusted for prediction.
    pub min_support: usize,
}

impl Default for PathwayConfig {
    fn default() -> Self {
        PathwayConfig { trigger_confidence: 0.8, trigger_windows: 3, merge_gap_s: 120, min_support: 5 }
    }
}

fn positive(d: &DetectionEvent, threshold: f64) -> bool {
    d.predicted.is_arrhythmic() && d.confidence >= threshold
}

/// Single transition. Detections are accepted in every stage and only move
/// Screening (PPG) and EcgConfirm (ECG); scripted events must match their stage.
pub fn step(s: &PathwayState, e: &PathwayEvent, threshold: f64) -> Result<PathwayState> {
    let next = match (s.stage, e) {
        (Stage::Screening, PathwayEvent::Detection(d))
            if d.source == SignalSource::Ppg && positive(d, threshold) =>
        {
            Stage::EcgConfirm
        }
        (Stage::EcgConfirm, PathwayEvent::Detection(d)) if d.source == SignalSource::Ecg => {
            if d.predicted.is_arrhythmic() {
                Stage::DataCollection
            } else {
                Stage::Screening
            }
        }
        (stage, PathwayEvent::Detection(_)) => stage,
        (Stage::DataCollection, PathwayEvent::ReportComplete { .. }) => Stage::ClinicianReview,
        (Stage::ClinicianReview, PathwayEvent::PrescriptionIssued { .. }) => Stage::TimedDelivery,
        (stage, ev) => return Err(Error::Transition { stage: stage.to_string(), event: ev.name() }),
    };
    if next == s.stage {
        return Ok(s.clone());
    }
    Ok(PathwayState { stage: next, entered_at: e.ts(), patient_id: s.patient_id.clone() })
}

/// Counts consecutive qualifying PPG detections; ECG detections pass through untouched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreeningDebouncer {
    pub threshold: f64,
    pub required: usize,
    pub run: usize,
}

impl ScreeningDebouncer {
    pub fn new(threshold: f64, required: usize) -> Self {
        ScreeningDebouncer { threshold, required: required.max(1), run: 0 }
    }

    /// True once the current PPG run reaches the required length.
    pub fn observe(&mut self, d: &DetectionEvent) -> bool {
        if d.source != SignalSource::Ppg {
            return false;
        }
        if positive(d, self.threshold) {
            self.run += 1;
        } else {
            self.run = 0;
        }
        self.run >= self.required
    }

    pub fn reset(&mut self) {
        self.run = 0;
    }
}

/// State machine plus screening debounce.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pathway {
    pub state: PathwayState,
    pub config: PathwayConfig,
    debouncer: ScreeningDebouncer,
}

impl Pathway {
    pub fn new(patient_id: impl Into<String>, now: Timestamp, config: PathwayConfig) -> Self {
        let debouncer = ScreeningDebouncer::new(config.trigger_confidence, config.trigger_windows);
        Pathway { state: PathwayState::new(patient_id, now), config, debouncer }
    }

    /// Returns the new stage if the event caused a transition.
    pub fn apply(&mut self, e: &PathwayEvent) -> Result<Option<Stage>> {
        if let PathwayEvent::Detection(d) = e {
            d.validate()?;
            let ready = self.debouncer.observe(d);
            if self.state.stage == Stage::Screening && d.source == SignalSource::Ppg && !ready {
                return Ok(None);
            }
        }
        let next = step(&self.state, e, self.config.trigger_confidence)?;
        if next.stage == self.state.stage {
            return Ok(None);
        }
        if next.stage == Stage::Screening {
            self.debouncer.reset();
        }
        self.state = next;
        Ok(Some(self.state.stage))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSpan {
    pub start: Timestamp,
    pub end: Timestamp,
    pub class: RhythmClass,
}

impl EpisodeSpan {
    pub fn duration_s(&self) -> i64 {
        self.end - self.start
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub merge_gap_s: i64,
    pub events: Vec<DetectionEvent>,
    pub episodes: Vec<EpisodeSpan>,
}

impl Default for EpisodeLog {
    fn default() -> Self {
        EpisodeLog::new(PathwayConfig::default().merge_gap_s)
    }
}

impl EpisodeLog {
    pub fn new(merge_gap_s: i64) -> Self {
        EpisodeLog { merge_gap_s, events: Vec::new(), episodes: Vec::new() }
    }

    /// Appends an event. Timestamps must strictly increase. An arrhythmic event
    /// extends the last span when the previous event had the same class and the
    /// gap is within `merge_gap_s`; anything else in between breaks the span.
    pub fn log(&mut self, e: DetectionEvent) -> Result<()> {
        e.validate()?;
        if let Some(last) = self.events.last() {
            if e.ts <= last.ts {
                return Err(Error::Ordering { ts: e.ts, last: last.ts });
            }
        }
        if e.predicted.is_arrhythmic() {
            let continues = self.events.last().is_some_and(|p| p.predicted == e.predicted)
                && self
                    .episodes
                    .last()
                    .is_some_and(|s| s.class == e.predicted && e.ts - s.end <= self.merge_gap_s);
            match self.episodes.last_mut() {
                Some(span) if continues => span.end = e.ts,
                _ => self.episodes.push(EpisodeSpan { start: e.ts, end: e.ts, class: e.predicted }),
            }
        }
        self.events.push(e);
        Ok(())
    }

    pub fn from_events(events: impl IntoIterator<Item = DetectionEvent>, merge_gap_s: i64) -> Result<Self> {
        let mut log = EpisodeLog::new(merge_gap_s);
        for e in events {
            log.log(e)?;
        }
        Ok(log)
    }

    /// Rebuilds the spans from the stored events.
    pub fn remerged(&self) -> Result<Self> {
        EpisodeLog::from_events(self.events.iter().cloned(), self.merge_gap_s)
    }
}

pub fn log_episode(log: &EpisodeLog, e: DetectionEvent) -> Result<EpisodeLog> {
    let mut next = log.clone();
    next.log(e)?;
    Ok(next)
}

/// Parses line-delimited JSON detection events. Blank lines are skipped.
pub fn parse_events_jsonl(text: &str) -> Result<Vec<DetectionEvent>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let e: DetectionEvent =
            serde_json::from_str(line).map_err(|err| Error::Parse { line: i + 1, message: err.to_string() })?;
        e.validate().map_err(|err| Error::Parse { line: i + 1, message: err.to_string() })?;
        out.push(e);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CircadianProfile {
    pub hourly_mass: [f64; 24],
    pub n_episodes: usize,
}

impl CircadianProfile {
    pub fn empty() -> Self {
        CircadianProfile { hourly_mass: [0.0; 24], n_episodes: 0 }
    }

    /// Normalized histogram of local start hours.
    pub fn from_start_hours(hours: impl IntoIterator<Item = usize>) -> Self {
        let mut counts = [0usize; 24];
        let mut n = 0;
        for h in hours {
            counts[h % 24] += 1;
            n += 1;
        }
        if n == 0 {
            return CircadianProfile::empty();
        }
        let mut hourly_mass = [0.0; 24];
        for (m, c) in hourly_mass.iter_mut().zip(counts) {
            *m = c as f64 / n as f64;
        }
        CircadianProfile { hourly_mass, n_episodes: n }
    }
}

pub fn circadian_profile(log: &EpisodeLog, offset: LocalOffset) -> CircadianProfile {
    CircadianProfile::from_start_hours(log.episodes.iter().map(|s| offset.hour(s.start)))
}

/// Circular hour window `[start_hour, start_hour + width_h)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HourWindow {
    pub start_hour: usize,
    pub width_h: usize,
    pub mass: f64,
}

impl HourWindow {
    pub fn contains(&self, hour: usize) -> bool {
        (hour + 24 - self.start_hour) % 24 < self.width_h
    }
}

pub fn window_mass(p: &CircadianProfile, start_hour: usize, width_h: usize) -> f64 {
    (0..width_h).map(|k| p.hourly_mass[(start_hour + k) % 24]).sum()
}

pub fn predict_window(p: &CircadianProfile, width_h: usize, min_support: usize) -> Result<HourWindow> {
    if !(1..=24).contains(&width_h) {
        return Err(Error::param(format!("window width {width_h} h outside [1,24]")));
    }
    if p.n_episodes == 0 || p.n_episodes < min_support {
        return Err(Error::InsufficientData(format!(
            "{} episodes, need at least {}",
            p.n_episodes,
            min_support.max(1)
        )));
    }
    let mut best = HourWindow { start_hour: 0, width_h, mass: window_mass(p, 0, width_h) };
    for start in 1..24 {
        let mass = window_mass(p, start, width_h);
        // tolerance keeps the earliest start when sums differ only by rounding
        if mass > best.mass + 1e-12 {
            best = HourWindow { start_hour: start, width_h, mass };
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct HasBledFactors {
    pub hypertension: bool,
    pub abnormal_renal: bool,
    pub abnormal_liver: bool,
    pub stroke_history: bool,
    pub bleeding_history: bool,
    pub labile_inr: bool,
    pub elderly_over_65: bool,
    pub antiplatelet_or_nsaid: bool,
    pub alcohol_excess: bool,
}

pub fn score_has_bled(f: &HasBledFactors) -> u8 {
    [
        f.hypertension,
        f.abnormal_renal,
        f.abnormal_liver,
        f.stroke_history,
        f.bleeding_history,
        f.labile_inr,
        f.elderly_over_65,
        f.antiplatelet_or_nsaid,
        f.alcohol_excess,
    ]
    .iter()
    .filter(|&&b| b)
    .count() as u8
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChadsVascFactors {
    pub chf: bool,
    pub hypertension: bool,
    pub age_75_plus: bool,
    pub diabetes: bool,
    pub stroke_tia_history: bool,
    pub vascular_disease: bool,
    pub age_65_74: bool,
    pub female: bool,
}

pub fn score_cha2ds2_vasc(f: &ChadsVascFactors) -> Result<u8> {
    if f.age_75_plus && f.age_65_74 {
        return Err(Error::param("age_75_plus and age_65_74 are mutually exclusive"));
    }
    let weighted = [
        (f.chf, 1),
        (f.hypertension, 1),
        (f.age_75_plus, 2),
        (f.diabetes, 1),
        (f.stroke_tia_history, 2),
        (f.vascular_disease, 1),
        (f.age_65_74, 1),
        (f.female, 1),
    ];
    Ok(weighted.iter().filter(|(b, _)| *b).map(|(_, w)| w).sum())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Demographics {
    pub age: Option<u32>,
    pub sex: Option<String>,
    pub height_cm: Option<f64>,
    pub weight_kg: Option<f64>,
}

/// Questionnaire answers collected at intake.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatientRecord {
    pub patient_id: String,
    pub name: Option<String>,
    pub demographics: Demographics,
    pub medical_history: Vec<String>,
    pub medications: Vec<String>,
    pub has_bled: HasBledFactors,
    pub chads_vasc: ChadsVascFactors,
    pub utc_offset: LocalOffset,
    /// Free-form extra answers.
    pub answers: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RiskScores {
    pub has_bled: u8,
    pub cha2ds2_vasc: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpisodeRow {
    pub start: Timestamp,
    pub end: Timestamp,
    pub start_local: String,
    pub class: RhythmClass,
    pub duration_s: i64,
}

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Report {
    pub report_version: u32,
    pub patient_id: String,
    pub generated_at: Timestamp,
    pub stage: Stage,
    pub name: Option<String>,
    pub demographics: Demographics,
    pub medical_history: Vec<String>,
    pub medications: Vec<String>,
    pub answers: BTreeMap<String, String>,
    pub scores: RiskScores,
    pub episodes: Vec<EpisodeRow>,
    pub circadian: CircadianProfile,
    /// Local date to number of ECG readings that day.
    pub ecg_readings_per_day: BTreeMap<String, usize>,
}

pub fn generate_report(
    patient: &PatientRecord,
    state: &PathwayState,
    log: &EpisodeLog,
    now: Timestamp,
) -> Result<Report> {
    if state.stage < Stage::DataCollection {
        return Err(Error::Stage(format!("report needs DataCollection or later, pathway is at {}", state.stage)));
    }
    let off = patient.utc_offset;
    let scores =
        RiskScores { has_bled: score_has_bled(&patient.has_bled), cha2ds2_vasc: score_cha2ds2_vasc(&patient.chads_vasc)? };
    let episodes = log
        .episodes
        .iter()
        .map(|s| EpisodeRow {
            start: s.start,
            end: s.end,
            start_local: off.format_datetime(s.start),
            class: s.class,
            duration_s: s.duration_s(),
        })
        .collect();
    let mut ecg_readings_per_day = BTreeMap::new();
    for e in log.events.iter().filter(|e| e.source == SignalSource::Ecg) {
        *ecg_readings_per_day.entry(off.day(e.ts).to_string()).or_insert(0) += 1;
    }
    Ok(Report {
        report_version: REPORT_VERSION,
        patient_id: patient.patient_id.clone(),
        generated_at: now,
        stage: state.stage,
        name: patient.name.clone(),
        demographics: patient.demographics.clone(),
        medical_history: patient.medical_history.clone(),
        medications: patient.medications.clone(),
        answers: patient.answers.clone(),
        scores,
        episodes,
        circadian: circadian_profile(log, off),
        ecg_readings_per_day,
    })
}

impl Report {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: Report = serde_json::from_str(text)?;
        if r.report_version != REPORT_VERSION {
            return Err(Error::param(format!("unsupported report_version {}", r.report_version)));
        }
        Ok(r)
    }

    pub fn to_markdown(&self) -> String {
        let mut md = String::new();
        let _ = writeln!(md, "# Patient report: {}", self.patient_id);
        if let Some(name) = &self.name {
            let _ = writeln!(md, "\nName: {name}");
        }
        let _ = writeln!(md, "\nPathway stage: {}", self.stage);
        let d = &self.demographics;
        let opt = |v: Option<String>| v.unwrap_or_else(|| "n/a".into());
        let _ = writeln!(md, "\n## Demographics\n");
        let _ = writeln!(md, "- Age: {}", opt(d.age.map(|a| a.to_string())));
        let _ = writeln!(md, "- Sex: {}", opt(d.sex.clone()));
        let _ = writeln!(md, "- Height (cm): {}", opt(d.height_cm.map(|v| format!("{v:.0}"))));
        let _ = writeln!(md, "- Weight (kg): {}", opt(d.weight_kg.map(|v| format!("{v:.1}"))));
        let _ = writeln!(md, "\n## History and questionnaire\n");
        for h in &self.medical_history {
            let _ = writeln!(md, "- {h}");
        }
        for m in &self.medications {
            let _ = writeln!(md, "- Medication: {m}");
        }
        for (k, v) in &self.answers {
            let _ = writeln!(md, "- {k}: {v}");
        }
        let _ = writeln!(md, "\n## Risk scores\n");
        let _ = writeln!(md, "- HAS-BLED: {}", self.scores.has_bled);
        let _ = writeln!(md, "- CHA2DS2-VASc: {}", self.scores.cha2ds2_vasc);
        let _ = writeln!(md, "\n## Episodes ({})\n", self.episodes.len());
        let _ = writeln!(md, "| Start (local) | Class | Duration (s) |");
        let _ = writeln!(md, "|---|---|---|");
        for e in &self.episodes {
            let _ = writeln!(md, "| {} | {} | {} |", e.start_local, e.class, e.duration_s);
        }
        let _ = writeln!(md, "\n## Circadian profile ({} episodes)\n", self.circadian.n_episodes);
        for (h, m) in self.circadian.hourly_mass.iter().enumerate() {
            let bar = "#".repeat((m * 40.0).round() as usize);
            let _ = writeln!(md, "    {h:02}h {m:5.3} {bar}");
        }
        let _ = writeln!(md, "\n## ECG readings per day\n");
        for (day, n) in &self.ecg_readings_per_day {
            let _ = writeln!(md, "- {day}: {n}");
        }
        md
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal_sim::RhythmClass::*;

    fn ev(ts: Timestamp, source: SignalSource, class: RhythmClass, conf: f64) -> DetectionEvent {
        DetectionEvent::new(ts, source, class, conf).unwrap()
    }

    #[test]
    fn defined_transitions() {
        let s = PathwayState::new("p1", 0);
        let ppg = PathwayEvent::Detection(ev(10, SignalSource::Ppg, AFib, 0.95));
        let s1 = step(&s, &ppg, 0.8).unwrap();
        assert_eq!((s1.stage, s1.entered_at), (Stage::EcgConfirm, 10));
        let neg = PathwayEvent::Detection(ev(20, SignalSource::Ecg, Nsr, 0.9));
        assert_eq!(step(&s1, &neg, 0.8).unwrap().stage, Stage::Screening);
        let err = step(&s, &PathwayEvent::PrescriptionIssued { ts: 5 }, 0.8).unwrap_err();
        assert!(matches!(err, Error::Transition { ref stage, .. } if stage == "Screening"), "{err}");
        let low = PathwayEvent::Detection(ev(10, SignalSource::Ppg, AFib, 0.5));
        assert_eq!(step(&s, &low, 0.8).unwrap(), s);
    }

    #[test]
    fn timed_delivery_only_through_every_stage() {
        let events = [
            PathwayEvent::Detection(ev(1, SignalSource::Ppg, AFib, 0.9)),
            PathwayEvent::Detection(ev(1, SignalSource::Ppg, Nsr, 0.9)),
            PathwayEvent::Detection(ev(1, SignalSource::Ecg, AFib, 0.9)),
            PathwayEvent::Detection(ev(1, SignalSource::Ecg, Nsr, 0.9)),
            PathwayEvent::ReportComplete { ts: 1 },
            PathwayEvent::PrescriptionIssued { ts: 1 },
        ];
        // every successful transition moves at most one stage forward, or back to Screening
        for &from in &Stage::ALL {
            let s = PathwayState { stage: from, entered_at: 0, patient_id: "p".into() };
            for e in &events {
                if let Ok(n) = step(&s, e, 0.8) {
                    let (a, b) = (from as usize, n.stage as usize);
                    assert!(b == a || b == a + 1 || (from == Stage::EcgConfirm && n.stage == Stage::Screening));
                }
            }
        }
    }

    #[test]
    fn debounce_needs_three_consecutive() {
        let mut p = Pathway::new("p", 0, PathwayConfig::default());
        let d = |ts, c| PathwayEvent::Detection(ev(ts, SignalSource::Ppg, AFib, c));
        assert_eq!(p.apply(&d(1, 0.9)).unwrap(), None);
        assert_eq!(p.apply(&d(2, 0.9)).unwrap(), None);
        assert_eq!(p.apply(&d(3, 0.7)).unwrap(), None);
        assert_eq!(p.apply(&d(4, 0.9)).unwrap(), None);
        assert_eq!(p.apply(&d(5, 0.9)).unwrap(), None);
        assert_eq!(p.apply(&d(6, 0.85)).unwrap(), Some(Stage::EcgConfirm));
        assert_eq!(p.state.entered_at, 6);
    }

    #[test]
    fn episode_merging() {
        let mut log = EpisodeLog::default();
        log.log(ev(0, SignalSource::Ppg, AFib, 0.9)).unwrap();
        log.log(ev(60, SignalSource::Ppg, AFib, 0.9)).unwrap();
        log.log(ev(660, SignalSource::Ppg, AFib, 0.9)).unwrap();
        log.log(ev(700, SignalSource::Ppg, Nsr, 0.9)).unwrap();
        log.log(ev(720, SignalSource::Ppg, AFib, 0.9)).unwrap();
        let spans: Vec<_> = log.episodes.iter().map(|s| (s.start, s.end)).collect();
        assert_eq!(spans, vec![(0, 60), (660, 660), (720, 720)]);
        assert_eq!(log.remerged().unwrap(), log);
        assert!(matches!(log.log(ev(720, SignalSource::Ecg, AFib, 0.9)), Err(Error::Ordering { .. })));

        let nsr_only = EpisodeLog::from_events((0..5).map(|i| ev(i * 10, SignalSource::Ppg, Nsr, 0.9)), 120).unwrap();
        assert!(nsr_only.episodes.is_empty());
    }

    #[test]
    fn events_jsonl() {
        let text = "{\"ts\":5,\"source\":\"PPG\",\"class\":\"AFib\",\"confidence\":0.9}\n\n\
                    {\"ts\":6,\"source\":\"ECG\",\"class\":\"NSR\",\"confidence\":1.0}\n";
        let evs = parse_events_jsonl(text).unwrap();
        assert_eq!(evs[1], ev(6, SignalSource::Ecg, Nsr, 1.0));
        let bad = "{\"ts\":5,\"source\":\"PPG\",\"class\":\"AFib\",\"confidence\":1.5}";
        assert!(matches!(parse_events_jsonl(bad), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn profile_and_window() {
        assert!(matches!(predict_window(&CircadianProfile::empty(), 2, 5), Err(Error::InsufficientData(_))));
        let p = CircadianProfile::from_start_hours(vec![3; 10]);
        assert_eq!(p.hourly_mass[3], 1.0);
        let w = predict_window(&p, 2, 5).unwrap();
        assert_eq!((w.start_hour, w.mass), (2, 1.0));
        assert!(w.contains(3));
        let u = CircadianProfile::from_start_hours(0..24);
        assert!((u.hourly_mass.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(predict_window(&u, 3, 5).unwrap().start_hour, 0);
        let wrap = CircadianProfile::from_start_hours([23, 23, 0, 0, 0, 12]);
        let w = predict_window(&wrap, 2, 5).unwrap();
        assert_eq!(w.start_hour, 23);
        assert!(w.contains(0));
    }

    #[test]
    fn score_examples() {
        assert_eq!(score_has_bled(&HasBledFactors::default()), 0);
        let f = HasBledFactors { hypertension: true, elderly_over_65: true, alcohol_excess: true, ..Default::default() };
        assert_eq!(score_has_bled(&f), 3);
        let c = ChadsVascFactors { female: true, age_75_plus: true, hypertension: true, ..Default::default() };
        assert_eq!(score_cha2ds2_vasc(&c).unwrap(), 4);
        let c = ChadsVascFactors { stroke_tia_history: true, ..Default::default() };
        assert_eq!(score_cha2ds2_vasc(&c).unwrap(), 2);
        let both = ChadsVascFactors { age_75_plus: true, age_65_74: true, ..Default::default() };
        assert!(score_cha2ds2_vasc(&both).is_err());
    }

    #[test]
    fn report_round_trip() {
        let patient = PatientRecord { patient_id: "p7".into(), ..Default::default() };
        let mut state = PathwayState::new("p7", 0);
        let log = EpisodeLog::from_events(
            [ev(100, SignalSource::Ppg, AFib, 0.9), ev(150, SignalSource::Ecg, AFib, 0.9)],
            120,
        )
        .unwrap();
        assert!(matches!(generate_report(&patient, &state, &log, 200), Err(Error::Stage(_))));
        state.stage = Stage::DataCollection;
        let r = generate_report(&patient, &state, &log, 200).unwrap();
        assert_eq!(r.episodes[0].duration_s, 50);
        assert_eq!(r.ecg_readings_per_day["1970-01-01"], 1);
        assert_eq!(Report::from_json(&r.to_json().unwrap()).unwrap(), r);
        assert!(r.to_markdown().contains("CHA2DS2-VASc: 0"));
        let empty = generate_report(&patient, &state, &EpisodeLog::default(), 200).unwrap();
        assert!(empty.episodes.is_empty());
    }
}
