use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::audit::{AuditBody, AuditHeader, AuditLog, AuditRecord, TransitionCause};
use super::plan_day;
use crate::dosing::{authorize_dose, record_delivery, Delivery, DoseRequest, SafetyState};
use crate::pathway::{circadian_profile, EpisodeLog, Pathway, PathwayEvent, Stage};
use crate::pump::{actuate, volume_to_steps, PumpState};
use crate::time::Timestamp;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    /// Position in the log; equal to the record count when the log ends early.
    pub index: usize,
    pub kind: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub consistent: bool,
    pub records: usize,
    pub authorizations: usize,
    pub granted: usize,
    pub deliveries: usize,
    pub final_stage: Option<Stage>,
    pub final_pump: Option<PumpState>,
    pub divergence: Option<Divergence>,
}

struct Replayer {
    header: AuditHeader,
    last: Option<(u64, Timestamp)>,
    safety: SafetyState,
    pathway: Pathway,
    episodes: EpisodeLog,
    pump: PumpState,
    expect_transition: Option<(Stage, Stage)>,
    planned: BTreeMap<String, (Timestamp, f64)>,
    granted: BTreeMap<String, f64>,
    halted: bool,
    authorizations: usize,
    granted_count: usize,
    deliveries: usize,
}

/// Re-executes the log: pathway steps, schedules, authorizations and pump
/// moves are recomputed from the header and earlier records and compared with
/// what was written. Stops at the first record that disagrees.
pub fn replay(log: &AuditLog) -> Verdict {
    let records = log.records();
    let mut verdict = Verdict {
        consistent: true,
        records: records.len(),
        authorizations: 0,
        granted: 0,
        deliveries: 0,
        final_stage: None,
        final_pump: None,
        divergence: None,
    };
    let Some(first) = records.first() else {
        return verdict;
    };
    let diverge = |verdict: &mut Verdict, index: usize, kind: &str, reason: String| {
        verdict.consistent = false;
        verdict.divergence = Some(Divergence { index, kind: kind.into(), reason });
    };
    let AuditBody::Header(header) = &first.body else {
        diverge(&mut verdict, 0, first.body.kind(), "log does not start with a header".into());
        return verdict;
    };
    let mut r = Replayer {
        safety: SafetyState::new(header.utc_offset, header.start_ts),
        pathway: Pathway::new(header.patient_id.clone(), header.start_ts, header.pathway.clone()),
        episodes: EpisodeLog::new(header.pathway.merge_gap_s),
        pump: PumpState::fresh(&header.geometry),
        header: header.clone(),
        last: Some((first.seq, first.ts)),
        expect_transition: None,
        planned: BTreeMap::new(),
        granted: BTreeMap::new(),
        halted: false,
        authorizations: 0,
        granted_count: 0,
        deliveries: 0,
    };
    let mut failure = None;
    for (i, rec) in records.iter().enumerate().skip(1) {
        if let Err(reason) = r.check(rec) {
            failure = Some((i, rec.body.kind(), reason));
            break;
        }
    }
    if failure.is_none() {
        if let Some((_, to)) = r.expect_transition {
            failure = Some((records.len(), "end", format!("log ends before the transition to {to}")));
        }
    }
    verdict.authorizations = r.authorizations;
    verdict.granted = r.granted_count;
    verdict.deliveries = r.deliveries;
    verdict.final_stage = Some(r.pathway.state.stage);
    verdict.final_pump = Some(r.pump);
    if let Some((i, kind, reason)) = failure {
        diverge(&mut verdict, i, kind, reason);
    }
    verdict
}

impl Replayer {
    fn check(&mut self, rec: &AuditRecord) -> Result<(), String> {
        if self.halted {
            return Err("record after a fault".into());
        }
        if let Some((seq, ts)) = self.last {
            if rec.seq <= seq {
                return Err(format!("sequence {} does not follow {seq}", rec.seq));
            }
            if rec.ts < ts {
                return Err(format!("time {} precedes {ts}", rec.ts));
            }
        }
        self.last = Some((rec.seq, rec.ts));
        if let Some((from, to)) = self.expect_transition {
            let AuditBody::Transition(t) = &rec.body else {
                return Err(format!("expected the transition {from} -> {to} here"));
            };
            if (t.from, t.to, t.cause) != (from, to, TransitionCause::Detection) {
                return Err(format!("recorded {} -> {} ({:?}), replay gives {from} -> {to}", t.from, t.to, t.cause));
            }
            self.expect_transition = None;
            return Ok(());
        }
        match &rec.body {
            AuditBody::Header(_) => Err("second header".into()),
            AuditBody::Detection(d) => {
                if d.ts != rec.ts {
                    return Err("detection time differs from record time".into());
                }
                self.episodes.log(d.clone()).map_err(|e| e.to_string())?;
                let from = self.pathway.state.stage;
                if let Some(to) = self.pathway.apply(&PathwayEvent::Detection(d.clone())).map_err(|e| e.to_string())? {
                    self.expect_transition = Some((from, to));
                }
                Ok(())
            }
            AuditBody::Transition(t) => {
                let event = match t.cause {
                    TransitionCause::Detection => {
                        return Err(format!("transition {} -> {} without a detection causing it", t.from, t.to))
                    }
                    TransitionCause::ReportComplete => PathwayEvent::ReportComplete { ts: rec.ts },
                    TransitionCause::PrescriptionIssued => PathwayEvent::PrescriptionIssued { ts: rec.ts },
                };
                let from = self.pathway.state.stage;
                let to = self.pathway.apply(&event).map_err(|e| e.to_string())?;
                if from != t.from || to != Some(t.to) {
                    return Err(format!("recorded {} -> {}, replay gives {from} -> {to:?}", t.from, t.to));
                }
                Ok(())
            }
            AuditBody::Schedule(plan) => {
                if self.pathway.state.stage != Stage::TimedDelivery {
                    return Err(format!("schedule in stage {}", self.pathway.state.stage));
                }
                let h = &self.header;
                let profile = circadian_profile(&self.episodes, h.utc_offset);
                let expected = plan_day(&h.prescription, &profile, plan.day, h.utc_offset, &h.predictive)
                    .map_err(|e| e.to_string())?;
                if &expected != plan {
                    return Err(format!(
                        "schedule differs from the scheduler: recorded {:?} {:?}, recomputed {:?} {:?}",
                        plan.basis, plan.window, expected.basis, expected.window
                    ));
                }
                self.planned = plan.doses.iter().filter(|d| d.ts >= rec.ts).map(|d| (d.id.clone(), (d.ts, d.ml))).collect();
                Ok(())
            }
            AuditBody::Authorization(a) => {
                self.authorizations += 1;
                let Some((ts, ml)) = self.planned.remove(&a.request_id) else {
                    return Err(format!("authorization for unplanned request {}", a.request_id));
                };
                if ts != rec.ts || a.ts != rec.ts || ml != a.ml {
                    return Err(format!("request {} does not match its plan entry", a.request_id));
                }
                let req = DoseRequest { id: a.request_id.clone(), ml: a.ml };
                let decision = authorize_dose(&self.safety, &self.header.prescription, &req, rec.ts);
                if decision != a.decision {
                    return Err(format!("recorded {:?}, recomputed {:?}", a.decision, decision));
                }
                if decision.is_authorized() {
                    self.safety =
                        record_delivery(&self.safety, Delivery { ts: rec.ts, ml: a.ml }).map_err(|e| e.to_string())?;
                    self.granted.insert(a.request_id.clone(), a.ml);
                    self.granted_count += 1;
                }
                Ok(())
            }
            AuditBody::Delivery(d) => {
                let Some(ml) = self.granted.remove(&d.request_id) else {
                    return Err(format!("delivery {} without a granted authorization", d.request_id));
                };
                let g = &self.header.geometry;
                let (steps, _) = volume_to_steps(g, ml).map_err(|e| e.to_string())?;
                let (mut next, result) = actuate(&self.pump, g, steps, 0.0).map_err(|f| f.code().to_string())?;
                next.last_command_id = Some(d.request_id.clone());
                let same = result.steps == d.steps
                    && result.delivered_ml == d.delivered_ml
                    && next.position_steps == d.position_steps
                    && next.remaining_ml == d.remaining_ml
                    && next.status == d.status;
                if !same {
                    return Err(format!(
                        "pump moved {} steps to {}, replay gives {} steps to {}",
                        d.steps, d.position_steps, result.steps, next.position_steps
                    ));
                }
                self.pump = next;
                self.deliveries += 1;
                Ok(())
            }
            AuditBody::Fault(_) => {
                self.halted = true;
                Ok(())
            }
        }
    }
}
