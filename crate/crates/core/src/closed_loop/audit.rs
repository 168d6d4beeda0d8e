use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dosing::{DecisionRecord, PredictiveConfig, Prescription};
use crate::error::{Error, Result};
use crate::pathway::{DetectionEvent, HourWindow, PathwayConfig, Stage};
use crate::pump::{PumpGeometry, PumpStatus};
use crate::time::{LocalOffset, Timestamp};

pub const AUDIT_VERSION: u32 = 1;

/// Everything replay needs to re-execute the log without the scenario file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditHeader {
    pub patient_id: String,
    pub utc_offset: LocalOffset,
    pub start_ts: Timestamp,
    pub end_ts: Timestamp,
    pub seed: u64,
    pub prescription: Prescription,
    pub predictive: PredictiveConfig,
    pub pathway: PathwayConfig,
    pub geometry: PumpGeometry,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransitionCause {
    Detection,
    ReportComplete,
    PrescriptionIssued,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionRecord {
    pub from: Stage,
    pub to: Stage,
    pub cause: TransitionCause,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanBasis {
    Predictive,
    Fixed,
    /// Profile support too thin; the prescription's fixed times were used.
    Fallback,
    /// Nothing could be scheduled.
    Empty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannedEntry {
    pub id: String,
    pub ts: Timestamp,
    pub ml: f64,
}

/// One local day's plan as decided at its timestamp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanRecord {
    pub day: chrono::NaiveDate,
    pub basis: PlanBasis,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<HourWindow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    pub doses: Vec<PlannedEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeliveryRecord {
    pub request_id: String,
    pub steps: u64,
    pub delivered_ml: f64,
    pub position_steps: u64,
    pub remaining_ml: f64,
    pub status: PumpStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultRecord {
    pub component: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum AuditBody {
    Header(AuditHeader),
    Detection(DetectionEvent),
    Transition(TransitionRecord),
    Schedule(PlanRecord),
    Authorization(DecisionRecord),
    Delivery(DeliveryRecord),
    Fault(FaultRecord),
}

impl AuditBody {
    pub fn kind(&self) -> &'static str {
        match self {
            AuditBody::Header(_) => "header",
            AuditBody::Detection(_) => "detection",
            AuditBody::Transition(_) => "transition",
            AuditBody::Schedule(_) => "schedule",
            AuditBody::Authorization(_) => "authorization",
            AuditBody::Delivery(_) => "delivery",
            AuditBody::Fault(_) => "fault",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub v: u32,
    pub seq: u64,
    pub ts: Timestamp,
    #[serde(flatten)]
    pub body: AuditBody,
}

/// Append-only, time-ordered record list.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AuditLog {
    records: Vec<AuditRecord>,
}

impl AuditLog {
    pub fn new() -> Self {
        AuditLog::default()
    }

    /// Appends with the next sequence number; time may not go backwards.
    pub fn push(&mut self, ts: Timestamp, body: AuditBody) -> Result<&AuditRecord> {
        if let Some(last) = self.records.last() {
            if ts < last.ts {
                return Err(Error::Ordering { ts, last: last.ts });
            }
        }
        let seq = self.records.len() as u64;
        self.records.push(AuditRecord { v: AUDIT_VERSION, seq, ts, body });
        Ok(self.records.last().expect("just pushed"))
    }

    /// Wraps already numbered records, e.g. parsed or edited ones, without checks.
    pub fn from_records(records: Vec<AuditRecord>) -> Self {
        AuditLog { records }
    }

    pub fn records(&self) -> &[AuditRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<AuditRecord> {
        self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn header(&self) -> Option<&AuditHeader> {
        match self.records.first().map(|r| &r.body) {
            Some(AuditBody::Header(h)) => Some(h),
            _ => None,
        }
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf)?;
        Ok(String::from_utf8(buf).expect("serde_json emits UTF-8"))
    }

    /// Parses JSON lines; blank lines are skipped. Ordering is left to `replay`.
    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let r: AuditRecord =
                serde_json::from_str(line).map_err(|e| Error::Parse { line: i + 1, message: e.to_string() })?;
            if r.v != AUDIT_VERSION {
                return Err(Error::Parse { line: i + 1, message: format!("unsupported audit version {}", r.v) });
            }
            records.push(r);
        }
        Ok(AuditLog { records })
    }
}
