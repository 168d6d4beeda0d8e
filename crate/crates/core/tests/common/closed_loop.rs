use std::collections::{BTreeMap, HashSet};

use cardioloop::closed_loop::{
    run_with_detectors, AuditBody, AuditLog, LoopConfig, LoopOutcome, OracleDetector, ScriptedEpisode,
};
use cardioloop::dosing::{DoseTime, DosingMode, Prescription};
use cardioloop::pathway::{SignalSource, Stage};
use cardioloop::signal_sim::RhythmClass;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn oracle_run(cfg: &LoopConfig, confidence: f64) -> LoopOutcome {
    let d = OracleDetector { confidence };
    run_with_detectors(cfg, &d, &d).unwrap()
}

fn local_day(ts: i64, offset_s: i64) -> i64 {
    (ts + offset_s).div_euclid(86_400)
}

/// Granted authorizations checked against count, volume and spacing limits
/// with plain integer day arithmetic.
pub fn safety_violations_in(log: &AuditLog, p: &Prescription, offset_s: i64) -> Vec<String> {
    let granted: Vec<(i64, f64)> = log
        .records()
        .iter()
        .filter_map(|r| match &r.body {
            AuditBody::Authorization(a) if a.decision.is_authorized() => Some((r.ts, a.ml)),
            _ => None,
        })
        .collect();
    let mut out = Vec::new();
    let mut per_day: BTreeMap<i64, (u32, f64)> = BTreeMap::new();
    for &(ts, ml) in &granted {
        let e = per_day.entry(local_day(ts, offset_s)).or_default();
        e.0 += 1;
        e.1 += ml;
        if ml > p.dose_ml + 1e-9 {
            out.push(format!("{ts}: {ml} mL over the unit dose"));
        }
    }
    for (day, (n, ml)) in per_day {
        if n > p.max_doses_per_day {
            out.push(format!("day {day}: {n} doses"));
        }
        if ml > p.daily_max_ml + 1e-9 {
            out.push(format!("day {day}: {ml} mL"));
        }
    }
    for w in granted.windows(2) {
        if w[1].0 - w[0].0 < p.min_interdose_interval_s {
            out.push(format!("{} and {} too close", w[0].0, w[1].0));
        }
    }
    out
}

/// Deliveries need an earlier granted authorization with the same id; every
/// EcgConfirm entry needs a qualifying PPG detection since the last transition.
pub fn causality_violations_in(log: &AuditLog, threshold: f64) -> Vec<String> {
    let mut out = Vec::new();
    let mut granted = HashSet::new();
    let mut qualifying_since_transition = false;
    for (i, r) in log.records().iter().enumerate() {
        match &r.body {
            AuditBody::Authorization(a) if a.decision.is_authorized() => {
                granted.insert(a.request_id.clone());
            }
            AuditBody::Delivery(d) if !granted.remove(&d.request_id) => {
                out.push(format!("record {i}: delivery {} without authorization", d.request_id));
            }
            AuditBody::Detection(d) => {
                if d.source == SignalSource::Ppg && d.predicted.is_arrhythmic() && d.confidence >= threshold {
                    qualifying_since_transition = true;
                }
            }
            AuditBody::Transition(t) => {
                if t.to == Stage::EcgConfirm && !qualifying_since_transition {
                    out.push(format!("record {i}: EcgConfirm without a qualifying PPG detection"));
                }
                qualifying_since_transition = false;
            }
            _ => {}
        }
    }
    out
}

pub fn stages_reached(log: &AuditLog) -> Vec<Stage> {
    let mut v = vec![Stage::Screening];
    for r in log.records() {
        if let AuditBody::Transition(t) = &r.body {
            v.push(t.to);
        }
    }
    v
}

/// Local times (seconds of day) and days of every delivery.
pub fn deliveries_in(log: &AuditLog, offset_s: i64) -> Vec<(i64, i64)> {
    log.records()
        .iter()
        .filter(|r| matches!(r.body, AuditBody::Delivery(_)))
        .map(|r| (local_day(r.ts, offset_s), (r.ts + offset_s).rem_euclid(86_400)))
        .collect()
}

/// Arrhythmic spans rebuilt from the detection records: same class, no other
/// detection in between, gaps within `merge_gap_s`.
pub fn episode_starts(log: &AuditLog, until: i64, merge_gap_s: i64) -> Vec<i64> {
    let mut starts = Vec::new();
    let mut open: Option<(RhythmClass, i64)> = None;
    for r in log.records().iter().take_while(|r| r.ts < until) {
        let AuditBody::Detection(d) = &r.body else { continue };
        if !d.predicted.is_arrhythmic() {
            open = None;
            continue;
        }
        match open {
            Some((c, end)) if c == d.predicted && d.ts - end <= merge_gap_s => open = Some((c, d.ts)),
            _ => {
                starts.push(d.ts);
                open = Some((d.predicted, d.ts));
            }
        }
    }
    starts
}

/// First local day whose plan was made with at least `min_support` episodes behind it.
pub fn support_day(log: &AuditLog, offset_s: i64, merge_gap_s: i64, min_support: usize) -> Option<i64> {
    log.records().iter().find_map(|r| match &r.body {
        AuditBody::Schedule(_) if episode_starts(log, r.ts + 1, merge_gap_s).len() >= min_support => {
            Some(local_day(r.ts, offset_s))
        }
        _ => None,
    })
}

/// A random but valid scenario: a few days, random arrhythmia times and a
/// random prescription of either mode, judged by the oracle detector.
pub fn random_scenario(seed: u64) -> LoopConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = [RhythmClass::AFib, RhythmClass::Brady, RhythmClass::Tachy];
    // episodes that start and stop on different days move the predicted window
    let episodes = (0..rng.random_range(0..4))
        .map(|_| {
            let first_day = rng.random_range(0..3);
            ScriptedEpisode {
                class: classes[rng.random_range(0..3)],
                hour: rng.random_range(0..24),
                minute: rng.random_range(0..60),
                duration_s: rng.random_range(60..3600),
                first_day,
                last_day: rng.random::<bool>().then(|| first_day + rng.random_range(0..3)),
            }
        })
        .collect();
    let max = rng.random_range(1..=3u32);
    let gap_h = 24 / max;
    let first = rng.random_range(0..gap_h);
    let fixed_times = (0..max).map(|k| DoseTime::new(first + k * gap_h, 0).unwrap()).collect();
    let dose_ml = rng.random_range(0.1..0.6);
    let prescription = Prescription {
        version: 1,
        dose_ml,
        max_doses_per_day: max,
        min_interdose_interval_s: rng.random_range(1..=gap_h as i64) * 3600,
        daily_max_ml: dose_ml * max as f64 * rng.random_range(1.0..1.3),
        mode: if rng.random::<bool>() { DosingMode::PredictionBased } else { DosingMode::PrescriptionBased },
        fixed_times,
        lead_time_s: rng.random_range(0..7200),
    };
    let mut cfg = LoopConfig {
        seed,
        days: rng.random_range(3..=6),
        episodes,
        prescription,
        report_after_s: rng.random_range(0..43_200),
        prescription_after_s: rng.random_range(0..43_200),
        ..LoopConfig::default()
    };
    cfg.patient.utc_offset.0 = rng.random_range(-12..=12) * 3600;
    cfg.predictive.min_support = rng.random_range(1..4);
    cfg
}
