use cardioloop::spectro::{cwt, make_scales, CwtPlan, MorletParams, ScaleVector};
use proptest::prelude::*;

mod common;
use common::{brute_force_cwt as brute_force, test_signal};

#[test]
fn production_matches_direct_summation() {
    let p = MorletParams::default();
    let scales = make_scales(0.5, 40.0, 16, 125.0, &p).unwrap();
    let x = test_signal(512, 7);
    let fast = cwt(&x, &scales, &p).unwrap();
    let slow = brute_force(&x, &scales.scales, &p);
    let peak = slow.iter().map(|(r, i)| r.hypot(*i)).fold(0.0, f64::max);
    let worst = fast
        .coefficients
        .iter()
        .zip(&slow)
        .map(|(f, (r, i))| (f.re - r).hypot(f.im - i))
        .fold(0.0, f64::max);
    assert!(worst / peak < 1e-9, "relative error {}", worst / peak);
}

#[test]
fn sinusoid_peaks_at_matching_scale() {
    let p = MorletParams::default();
    let fs = 125.0;
    let scales = make_scales(0.5, 40.0, 32, fs, &p).unwrap();
    let x: Vec<f64> = (0..1250).map(|i| (2.0 * std::f64::consts::PI * 5.0 * i as f64 / fs).sin()).collect();
    let s = cwt(&x, &scales, &p).unwrap();
    let mean_mag: Vec<f64> = (0..s.n_scales())
        .map(|r| s.row(r).iter().map(|c| c.norm()).sum::<f64>() / s.n_samples as f64)
        .collect();
    let best = (0..mean_mag.len()).max_by(|&a, &b| mean_mag[a].total_cmp(&mean_mag[b])).unwrap();
    let freqs = scales.frequencies(&p);
    let nearest = (0..freqs.len())
        .min_by(|&a, &b| (freqs[a] - 5.0).abs().total_cmp(&(freqs[b] - 5.0).abs()))
        .unwrap();
    assert!((best as i64 - nearest as i64).abs() <= 1, "best {best} nearest {nearest}");
}

#[test]
fn time_shift_moves_interior_columns() {
    let p = MorletParams::default();
    let scales = ScaleVector::new(vec![2.5, 4.0, 6.0, 9.0], 125.0).unwrap();
    let n = 400;
    let k = 17;
    let base = test_signal(n + k, 3);
    let x = &base[k..];
    let shifted = &base[..n];
    let plan = CwtPlan::new(n, &scales, &p).unwrap();
    let a = plan.transform(x, 0).unwrap();
    let b = plan.transform(shifted, 0).unwrap();
    let edge = (4.0 * 9.0f64).ceil() as usize + k;
    for r in 0..scales.len() {
        for c in edge..n - edge {
            let d = (a.get(r, c) - b.get(r, c + k)).norm();
            assert!(d < 1e-6, "row {r} col {c}: {d}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn linear_in_input(seed in 0u64..1000, alpha in -5.0f64..5.0) {
        let p = MorletParams::default();
        let scales = make_scales(1.0, 30.0, 6, 125.0, &p).unwrap();
        let x = test_signal(256, seed);
        let y = test_signal(256, seed + 1);
        let sum: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a + b).collect();
        let scaled: Vec<f64> = x.iter().map(|v| alpha * v).collect();
        let cx = cwt(&x, &scales, &p).unwrap();
        let cy = cwt(&y, &scales, &p).unwrap();
        let cs = cwt(&sum, &scales, &p).unwrap();
        let ca = cwt(&scaled, &scales, &p).unwrap();
        let peak = cs.coefficients.iter().map(|c| c.norm()).fold(1e-300, f64::max);
        for i in 0..cs.coefficients.len() {
            let d = (cs.coefficients[i] - cx.coefficients[i] - cy.coefficients[i]).norm();
            prop_assert!(d / peak < 1e-9);
            let m = (ca.coefficients[i].norm() - alpha.abs() * cx.coefficients[i].norm()).abs();
            prop_assert!(m <= 1e-9 * (1.0 + alpha.abs() * cx.coefficients[i].norm()));
        }
    }
}
