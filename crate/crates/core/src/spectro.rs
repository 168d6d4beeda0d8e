//! Morlet continuous wavelet transform, scalogram images and signal windowing.

use std::collections::HashMap;
use std::f64::consts::TAU;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal_sim::{Channel, RhythmClass, WaveformRecord};

/// Mother wavelet `exp(i 2π f_c t) · exp(-t² / 2σ²)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MorletParams {
    pub f_c: f64,
    pub sigma: f64,
}

impl Default for MorletParams {
    fn default() -> Self {
        MorletParams { f_c: 1.0, sigma: 1.0 }
    }
}

impl MorletParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.f_c > 0.0 && self.sigma > 0.0) {
            return Err(Error::param("Morlet f_c and sigma must be positive"));
        }
        Ok(())
    }
}

pub fn morlet(t: f64, p: &MorletParams) -> Complex64 {
    let envelope = (-(t * t) / (2.0 * p.sigma * p.sigma)).exp();
    Complex64::from_polar(envelope, TAU * p.f_c * t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleVector {
    pub scales: Vec<f64>,
    pub fs: f64,
}

impl ScaleVector {
    pub fn new(scales: Vec<f64>, fs: f64) -> Result<Self> {
        if scales.is_empty() || scales.iter().any(|&a| !(a > 0.0)) {
            return Err(Error::param("scales must be non-empty and positive"));
        }
        if scales.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::param("scales must be strictly increasing"));
        }
        if !(fs > 0.0) {
            return Err(Error::param("fs must be positive"));
        }
        Ok(ScaleVector { scales, fs })
    }

    pub fn len(&self) -> usize {
        self.scales.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scales.is_empty()
    }

    /// Pseudo-frequency `f_c · fs / a` of each scale, in Hz.
    pub fn frequencies(&self, p: &MorletParams) -> Vec<f64> {
        self.scales.iter().map(|a| p.f_c * self.fs / a).collect()
    }
}

/// `n` log-spaced scales whose pseudo-frequencies run from `f_max` down to `f_min`.
pub fn make_scales(f_min: f64, f_max: f64, n: usize, fs: f64, p: &MorletParams) -> Result<ScaleVector> {
    p.validate()?;
    if n < 2 {
        return Err(Error::param("need at least two scales"));
    }
    if !(f_min > 0.0 && f_min < f_max) {
        return Err(Error::param("require 0 < f_min < f_max"));
    }
    if f_max > fs / 2.0 {
        return Err(Error::param(format!("f_max {f_max} Hz exceeds Nyquist {} Hz", fs / 2.0)));
    }
    let a_min = p.f_c * fs / f_max;
    let a_max = p.f_c * fs / f_min;
    let ratio = (a_max / a_min).ln();
    let mut scales: Vec<f64> = (0..n)
        .map(|i| a_min * (ratio * i as f64 / (n - 1) as f64).exp())
        .collect();
    scales[0] = a_min;
    scales[n - 1] = a_max;
    ScaleVector::new(scales, fs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scalogram {
    /// Row-major `[n_scales × n_samples]`.
    pub coefficients: Vec<Complex64>,
    pub n_samples: usize,
    pub scales: ScaleVector,
    pub window_origin: usize,
}

impl Scalogram {
    pub fn n_scales(&self) -> usize {
        self.scales.len()
    }

    pub fn row(&self, r: usize) -> &[Complex64] {
        &self.coefficients[r * self.n_samples..(r + 1) * self.n_samples]
    }

    pub fn get(&self, r: usize, c: usize) -> Complex64 {
        self.coefficients[r * self.n_samples + c]
    }
}

/// Half-width in samples of the truncated wavelet support at scale `a`.
pub fn support_half_width(a: f64, p: &MorletParams) -> usize {
    (4.0 * p.sigma * a).floor() as usize
}

/// Conjugated, 1/√a-normalized, dilated wavelet taps for lags `-k..=k`.
fn correlation_taps(a: f64, p: &MorletParams, k: usize) -> Vec<Complex64> {
    let norm = 1.0 / a.sqrt();
    (-(k as isize)..=k as isize)
        .map(|lag| morlet(lag as f64 / a, p).conj() * norm)
        .collect()
}

// kernels shorter than this are applied by direct summation
const DIRECT_TAPS_MAX: usize = 65;

enum Kernel {
    Direct { half: usize, taps: Vec<Complex64> },
    Spectral { half: usize, fft_len: usize, spectrum: Vec<Complex64> },
}

/// Precomputed transform for a fixed window length and scale set.
pub struct CwtPlan {
    n: usize,
    scales: ScaleVector,
    kernels: Vec<Kernel>,
    forward: HashMap<usize, Arc<dyn Fft<f64>>>,
    inverse: HashMap<usize, Arc<dyn Fft<f64>>>,
}

impl CwtPlan {
    pub fn new(n: usize, scales: &ScaleVector, p: &MorletParams) -> Result<Self> {
        p.validate()?;
        if n == 0 {
            return Err(Error::param("window must be non-empty"));
        }
        let mut planner = FftPlanner::new();
        let mut forward = HashMap::new();
        let mut inverse = HashMap::new();
        let kernels = scales
            .scales
            .iter()
            .map(|&a| {
                // lags beyond the window never overlap the zero-padded signal
                let half = support_half_width(a, p).min(n - 1);
                let taps = correlation_taps(a, p, half);
                if taps.len() <= DIRECT_TAPS_MAX {
                    return Kernel::Direct { half, taps };
                }
                let fft_len = (n + 2 * half).next_power_of_two();
                let fwd = forward
                    .entry(fft_len)
                    .or_insert_with(|| planner.plan_fft_forward(fft_len))
                    .clone();
                inverse
                    .entry(fft_len)
                    .or_insert_with(|| planner.plan_fft_inverse(fft_len));
                // correlation as convolution with the reversed taps
                let mut spectrum = vec![Complex64::new(0.0, 0.0); fft_len];
                for (i, slot) in spectrum.iter_mut().take(taps.len()).enumerate() {
                    *slot = taps[taps.len() - 1 - i];
                }
                fwd.process(&mut spectrum);
                Kernel::Spectral { half, fft_len, spectrum }
            })
            .collect();
        Ok(CwtPlan { n, scales: scales.clone(), kernels, forward, inverse })
    }

    pub fn window_len(&self) -> usize {
        self.n
    }

    pub fn scales(&self) -> &ScaleVector {
        &self.scales
    }

    pub fn transform(&self, signal: &[f64], window_origin: usize) -> Result<Scalogram> {
        if signal.len() != self.n {
            return Err(Error::Shape(format!(
                "plan built for {} samples, got {}",
                self.n,
                signal.len()
            )));
        }
        let n = self.n;
        let mut spectra: HashMap<usize, Vec<Complex64>> = HashMap::new();
        let mut coefficients = Vec::with_capacity(n * self.kernels.len());
        for kernel in &self.kernels {
            match kernel {
                Kernel::Direct { half, taps } => {
                    let half = *half as isize;
                    for c in 0..n as isize {
                        let lo = (-half).max(-c);
                        let hi = half.min(n as isize - 1 - c);
                        let mut acc = Complex64::new(0.0, 0.0);
                        for lag in lo..=hi {
                            acc += taps[(lag + half) as usize] * signal[(c + lag) as usize];
                        }
                        coefficients.push(acc);
                    }
                }
                Kernel::Spectral { half, fft_len, spectrum } => {
                    let sig = spectra.entry(*fft_len).or_insert_with(|| {
                        let mut buf = vec![Complex64::new(0.0, 0.0); *fft_len];
                        for (b, &x) in buf.iter_mut().zip(signal) {
                            b.re = x;
                        }
                        self.forward[fft_len].process(&mut buf);
                        buf
                    });
                    let mut prod: Vec<Complex64> = sig.iter().zip(spectrum).map(|(a, b)| a * b).collect();
                    self.inverse[fft_len].process(&mut prod);
                    let scale = 1.0 / *fft_len as f64;
                    coefficients.extend(prod[*half..*half + n].iter().map(|v| v * scale));
                }
            }
        }
        Ok(Scalogram { coefficients, n_samples: n, scales: self.scales.clone(), window_origin })
    }
}

/// One-shot transform; build a [`CwtPlan`] to reuse kernels across windows.
pub fn cwt(signal: &[f64], scales: &ScaleVector, p: &MorletParams) -> Result<Scalogram> {
    CwtPlan::new(signal.len(), scales, p)?.transform(signal, 0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectroImage {
    pub height: usize,
    pub width: usize,
    /// Row-major, values in [0, 1].
    pub pixels: Vec<f64>,
    pub label: Option<RhythmClass>,
}

impl SpectroImage {
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.pixels[r * self.width + c]
    }
}

pub const DEFAULT_IMAGE_SIZE: usize = 64;
pub const DEFAULT_LOG_EPS: f64 = 1e-6;

/// Bilinear resampling with corner-aligned grids.
pub fn resize_bilinear(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let coord = |i: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        if n_out == 1 || n_in == 1 {
            return (0, 0, 0.0);
        }
        let x = i as f64 * (n_in - 1) as f64 / (n_out - 1) as f64;
        let x0 = (x.floor() as usize).min(n_in - 1);
        let x1 = (x0 + 1).min(n_in - 1);
        (x0, x1, x - x0 as f64)
    };
    let cols: Vec<_> = (0..out_w).map(|c| coord(c, w, out_w)).collect();
    let mut out = Vec::with_capacity(out_h * out_w);
    for r in 0..out_h {
        let (r0, r1, fr) = coord(r, h, out_h);
        for &(c0, c1, fc) in &cols {
            let top = src[r0 * w + c0] * (1.0 - fc) + src[r0 * w + c1] * fc;
            let bottom = src[r1 * w + c0] * (1.0 - fc) + src[r1 * w + c1] * fc;
            out.push(top * (1.0 - fr) + bottom * fr);
        }
    }
    out
}

/// Log-magnitude image, resized then min-max scaled into [0, 1]. Constant
/// input yields an all-zero image.
pub fn scalogram_to_image(s: &Scalogram, height: usize, width: usize, eps: f64) -> Result<SpectroImage> {
    if height < 8 || width < 8 {
        return Err(Error::param("image dimensions must be at least 8"));
    }
    if !(eps > 0.0) {
        return Err(Error::param("eps must be positive"));
    }
    let logmag: Vec<f64> = s.coefficients.iter().map(|c| (c.norm() + eps).ln()).collect();
    let mut pixels = resize_bilinear(&logmag, s.n_scales(), s.n_samples, height, width);
    let (lo, hi) = pixels
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if hi > lo {
        let span = hi - lo;
        for p in pixels.iter_mut() {
            *p = ((*p - lo) / span).clamp(0.0, 1.0);
        }
    } else {
        pixels.iter_mut().for_each(|p| *p = 0.0);
    }
    Ok(SpectroImage { height, width, pixels, label: None })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub origin: usize,
    pub fs: f64,
    pub channel: Channel,
    pub samples: Vec<f64>,
    pub label: RhythmClass,
}

/// Majority label; ties go to an arrhythmic class over NSR.
pub fn majority_label(labels: &[RhythmClass]) -> RhythmClass {
    let mut counts = [0usize; 4];
    for l in labels {
        counts[l.index()] += 1;
    }
    let best = *counts.iter().max().unwrap_or(&0);
    // arrhythmic classes first so they win ties
    [RhythmClass::AFib, RhythmClass::Brady, RhythmClass::Tachy, RhythmClass::Nsr]
        .into_iter()
        .find(|c| counts[c.index()] == best)
        .unwrap_or(RhythmClass::Nsr)
}

pub fn segment_windows(w: &WaveformRecord, window_s: f64, stride_s: f64) -> Result<Vec<Window>> {
    w.validate()?;
    if !(window_s > 0.0 && stride_s > 0.0) {
        return Err(Error::param("window and stride must be positive"));
    }
    let win = (window_s * w.fs).round() as usize;
    let stride = ((stride_s * w.fs).round() as usize).max(1);
    if win == 0 || win > w.len() {
        return Err(Error::param(format!(
            "window of {window_s} s exceeds record duration {:.3} s",
            w.duration_s()
        )));
    }
    let count = (w.len() - win) / stride + 1;
    Ok((0..count)
        .map(|i| {
            let origin = i * stride;
            Window {
                origin,
                fs: w.fs,
                channel: w.channel,
                samples: w.samples[origin..origin + win].to_vec(),
                label: majority_label(&w.sample_labels[origin..origin + win]),
            }
        })
        .collect())
}

/// Settings for turning windows into classifier images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpectroConfig {
    pub morlet: MorletParams,
    pub f_min: f64,
    /// Upper pseudo-frequency; `None` picks 40 Hz for PPG and 45 Hz for ECG.
    pub f_max: Option<f64>,
    pub n_scales: usize,
    pub height: usize,
    pub width: usize,
    pub eps: f64,
    pub window_s: f64,
    pub stride_s: f64,
}

impl Default for SpectroConfig {
    fn default() -> Self {
        SpectroConfig {
            morlet: MorletParams::default(),
            f_min: 0.5,
            f_max: None,
            n_scales: 32,
            height: DEFAULT_IMAGE_SIZE,
            width: DEFAULT_IMAGE_SIZE,
            eps: DEFAULT_LOG_EPS,
            window_s: 10.0,
            stride_s: 10.0,
        }
    }
}

impl SpectroConfig {
    pub fn f_max_for(&self, channel: Channel) -> f64 {
        self.f_max.unwrap_or(match channel {
            Channel::Ppg => 40.0,
            Channel::EcgLeadI => 45.0,
        })
    }

    pub fn scales_for(&self, channel: Channel, fs: f64) -> Result<ScaleVector> {
        make_scales(self.f_min, self.f_max_for(channel), self.n_scales, fs, &self.morlet)
    }
}

/// Window → image pipeline with a cached plan per window length.
pub struct Spectrogrammer {
    cfg: SpectroConfig,
    plan: CwtPlan,
}

impl Spectrogrammer {
    pub fn new(cfg: &SpectroConfig, channel: Channel, fs: f64) -> Result<Self> {
        let n = (cfg.window_s * fs).round() as usize;
        let scales = cfg.scales_for(channel, fs)?;
        let plan = CwtPlan::new(n, &scales, &cfg.morlet)?;
        Ok(Spectrogrammer { cfg: cfg.clone(), plan })
    }

    pub fn window_len(&self) -> usize {
        self.plan.window_len()
    }

    pub fn scales(&self) -> &ScaleVector {
        self.plan.scales()
    }

    pub fn scalogram(&self, samples: &[f64], origin: usize) -> Result<Scalogram> {
        self.plan.transform(samples, origin)
    }

    pub fn image(&self, samples: &[f64], label: Option<RhythmClass>) -> Result<SpectroImage> {
        let s = self.plan.transform(samples, 0)?;
        let mut img = scalogram_to_image(&s, self.cfg.height, self.cfg.width, self.cfg.eps)?;
        img.label = label;
        Ok(img)
    }

    pub fn window_image(&self, w: &Window) -> Result<SpectroImage> {
        self.image(&w.samples, Some(w.label))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageSidecar {
    pub label: Option<RhythmClass>,
    pub window_origin: usize,
    pub fs: f64,
    pub scales: Vec<f64>,
}

/// Writes `img` as ASCII PGM (P2) at 8-bit depth.
pub fn write_pgm<W: Write>(img: &SpectroImage, mut out: W) -> Result<()> {
    writeln!(out, "P2")?;
    writeln!(out, "{} {}", img.width, img.height)?;
    writeln!(out, "255")?;
    for r in 0..img.height {
        let row: Vec<String> = (0..img.width)
            .map(|c| ((img.get(r, c) * 255.0).round() as u8).to_string())
            .collect();
        writeln!(out, "{}", row.join(" "))?;
    }
    Ok(())
}

/// Exports `<stem>.pgm` and `<stem>.json` into `dir`.
pub fn export_image(img: &SpectroImage, sidecar: &ImageSidecar, dir: &Path, stem: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_pgm(img, fs::File::create(dir.join(format!("{stem}.pgm")))?)?;
    fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(sidecar)?)?;
    Ok(())
}
