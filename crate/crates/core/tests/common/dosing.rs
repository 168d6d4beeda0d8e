use cardioloop::dosing::{
    authorize_dose, record_delivery, Decision, Delivery, DoseRequest, DosingMode, Prescription, SafetyState,
};
use cardioloop::time::LocalOffset;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Decides from the full list of granted doses, not from any running state.
pub fn oracle_decision(
    granted: &[(i64, f64)],
    p: &Prescription,
    offset_s: i64,
    ml: f64,
    now: i64,
) -> Option<&'static str> {
    if !(ml > 0.0) {
        return Some("invalid-request");
    }
    let day = |t: i64| (t + offset_s).div_euclid(86_400);
    let same_day: Vec<_> = granted.iter().filter(|(t, _)| day(*t) == day(now)).collect();
    if same_day.len() >= p.max_doses_per_day as usize {
        return Some("max-doses-per-day");
    }
    if let Some((last, _)) = granted.last() {
        if now - last < p.min_interdose_interval_s {
            return Some("min-interval");
        }
    }
    let vol: f64 = same_day.iter().map(|(_, v)| v).sum();
    if vol + ml > p.daily_max_ml + 1e-9 {
        return Some("daily-max-volume");
    }
    if ml > p.dose_ml + 1e-9 {
        return Some("over-bolus");
    }
    None
}

/// Daily volume, daily count and spacing over a granted sequence.
pub fn safety_violations(granted: &[(i64, f64)], p: &Prescription, offset_s: i64) -> usize {
    let mut bad = 0;
    let mut by_day = std::collections::BTreeMap::<i64, (usize, f64)>::new();
    for (t, v) in granted {
        let e = by_day.entry((t + offset_s).div_euclid(86_400)).or_default();
        e.0 += 1;
        e.1 += v;
    }
    for (n, v) in by_day.values() {
        if *n > p.max_doses_per_day as usize {
            bad += 1;
        }
        if *v > p.daily_max_ml + 1e-9 {
            bad += 1;
        }
    }
    for w in granted.windows(2) {
        if w[1].0 - w[0].0 < p.min_interdose_interval_s {
            bad += 1;
        }
    }
    bad
}

pub fn random_prescription(rng: &mut ChaCha8Rng) -> Prescription {
    let n = rng.random_range(1..=4u32);
    let dose = rng.random_range(1..=20) as f64 * 0.5;
    // sometimes the budget is tighter than n full doses would need
    let daily = dose * n as f64 * if rng.random_bool(0.5) { 1.0 } else { rng.random_range(1.0..1.5) };
    let min_s = rng.random_range(0..=(24 / n as i64)) * 3600;
    Prescription {
        version: 1,
        dose_ml: dose,
        max_doses_per_day: n,
        min_interdose_interval_s: min_s,
        daily_max_ml: daily,
        mode: DosingMode::PredictionBased,
        fixed_times: vec![],
        lead_time_s: 0,
    }
}

#[derive(Debug, Default)]
pub struct FuzzSummary {
    pub sequences: usize,
    pub requests: usize,
    pub granted: usize,
    pub disagreements: usize,
    pub violations: usize,
}

/// Random request sequences checked against the replay oracle.
pub fn run_dosing_fuzz(sequences: usize, seed: u64) -> FuzzSummary {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = FuzzSummary { sequences, ..Default::default() };
    for _ in 0..sequences {
        let p = random_prescription(&mut rng);
        let offset_s = rng.random_range(-12..=14i64) * 3600;
        let off = LocalOffset(offset_s as i32);
        let mut now: i64 = 1_700_000_000 + rng.random_range(0..86_400);
        let mut state = SafetyState::new(off, now);
        let mut granted: Vec<(i64, f64)> = Vec::new();
        let len = rng.random_range(1..=24);
        for k in 0..len {
            now += match rng.random_range(0..4) {
                0 => 0,
                1 => rng.random_range(0..3_600),
                2 => rng.random_range(0..6 * 3_600),
                _ => rng.random_range(0..30 * 3_600),
            };
            let ml = match rng.random_range(0..6) {
                0 => p.dose_ml,
                1 => p.dose_ml * rng.random_range(1.0..1.5),
                2 => 0.0,
                _ => p.dose_ml * rng.random_range(0.01..1.0),
            };
            let req = DoseRequest { id: format!("r{k}"), ml };
            let d = authorize_dose(&state, &p, &req, now);
            let expected = oracle_decision(&granted, &p, offset_s, ml, now);
            let got = match &d {
                Decision::Authorized => None,
                Decision::Rejected { rule, .. } => Some(rule.name()),
            };
            sum.requests += 1;
            if got != expected {
                sum.disagreements += 1;
            }
            if d.is_authorized() {
                state = record_delivery(&state, Delivery { ts: now, ml }).expect("ordered");
                granted.push((now, ml));
                sum.granted += 1;
            }
        }
        sum.violations += safety_violations(&granted, &p, offset_s);
    }
    sum
}
