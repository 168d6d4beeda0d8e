use cardioloop::spectro::MorletParams;

/// Direct summation of the truncated, scale-normalized Morlet correlation.
pub fn brute_force_cwt(x: &[f64], scales: &[f64], p: &MorletParams) -> Vec<(f64, f64)> {
    let n = x.len() as i64;
    let mut out = Vec::new();
    for &a in scales {
        let half = (4.0 * p.sigma * a).floor() as i64;
        for b in 0..n {
            let (mut re, mut im) = (0.0, 0.0);
            for m in 0..n {
                let lag = m - b;
                if lag.abs() > half {
                    continue;
                }
                let t = lag as f64 / a;
                let g = (-t * t / (2.0 * p.sigma * p.sigma)).exp() / a.sqrt();
                let phase = 2.0 * std::f64::consts::PI * p.f_c * t;
                // x · conj(ψ)
                re += x[m as usize] * g * phase.cos();
                im -= x[m as usize] * g * phase.sin();
            }
            out.push((re, im));
        }
    }
    out
}

pub fn test_signal(n: usize, seed: u64) -> Vec<f64> {
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    (0..n)
        .map(|i| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            let noise = ((s >> 11) as f64 / (1u64 << 53) as f64) - 0.5;
            (i as f64 * 0.21).sin() + 0.4 * (i as f64 * 0.047).cos() + noise
        })
        .collect()
}
