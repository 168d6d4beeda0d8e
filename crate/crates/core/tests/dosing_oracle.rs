use std::sync::Arc;
use std::thread;

use cardioloop::dosing::{DoseRequest, Prescription, SafetyGate};
use cardioloop::time::LocalOffset;

mod common;

#[test]
fn random_sequences_match_replay_oracle() {
    let s = common::run_dosing_fuzz(5_000, 11);
    assert_eq!(s.disagreements, 0, "{s:?}");
    assert_eq!(s.violations, 0, "{s:?}");
    assert!(s.granted > 1_000, "{s:?}");
}

#[test]
fn concurrent_requests_cannot_double_spend() {
    let t0 = 1_700_000_000;
    let p = Prescription { min_interdose_interval_s: 0, ..Prescription::canonical() };
    let gate = Arc::new(SafetyGate::new(p, LocalOffset::UTC, t0).unwrap());
    let handles: Vec<_> = (0..16)
        .map(|i| {
            let g = gate.clone();
            thread::spawn(move || {
                (0..20)
                    .filter(|k| {
                        let req = DoseRequest { id: format!("{i}-{k}"), ml: 5.0 };
                        g.authorize_and_record(&req, t0 + 1).unwrap().is_authorized()
                    })
                    .count()
            })
        })
        .collect();
    let granted: usize = handles.into_iter().map(|h| h.join().unwrap()).sum();
    assert_eq!(granted, 3);
    assert_eq!(gate.decisions().len(), 320);
}
