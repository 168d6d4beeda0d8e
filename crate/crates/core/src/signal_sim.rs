//! Labeled RR-interval generation, PPG / ECG Lead I waveform synthesis, artifact
//! injection and the waveform CSV / dataset manifest formats.

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MIN_RR_S: f64 = 0.2;
pub const MAX_RR_S: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RhythmClass {
    #[serde(rename = "NSR")]
    Nsr,
    AFib,
    Brady,
    Tachy,
}

impl RhythmClass {
    pub const ALL: [RhythmClass; 4] = [
        RhythmClass::Nsr,
        RhythmClass::AFib,
        RhythmClass::Brady,
        RhythmClass::Tachy,
    ];

    pub fn is_arrhythmic(self) -> bool {
        self != RhythmClass::Nsr
    }

    /// Label spelling used in waveform CSV files.
    pub fn csv_label(self) -> &'static str {
        match self {
            RhythmClass::Nsr => "NSR",
            RhythmClass::AFib => "AFIB",
            RhythmClass::Brady => "BRADY",
            RhythmClass::Tachy => "TACHY",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for RhythmClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            RhythmClass::Nsr => "NSR",
            RhythmClass::AFib => "AFib",
            RhythmClass::Brady => "Brady",
            RhythmClass::Tachy => "Tachy",
        };
        f.write_str(s)
    }
}

impl FromStr for RhythmClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "NSR" => Ok(RhythmClass::Nsr),
            "AFIB" => Ok(RhythmClass::AFib),
            "BRADY" => Ok(RhythmClass::Brady),
            "TACHY" => Ok(RhythmClass::Tachy),
            other => Err(Error::param(format!("unknown rhythm class `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Channel {
    #[serde(rename = "PPG")]
    Ppg,
    #[serde(rename = "ECG1")]
    EcgLeadI,
}

impl Channel {
    pub fn default_fs(self) -> f64 {
        match self {
            Channel::Ppg => 125.0,
            Channel::EcgLeadI => 500.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Channel::Ppg => "PPG",
            Channel::EcgLeadI => "ECG1",
        }
    }
}

impl FromStr for Channel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "PPG" => Ok(Channel::Ppg),
            "ECG1" | "ECG" | "ECG_LEAD_I" => Ok(Channel::EcgLeadI),
            other => Err(Error::param(format!("unknown channel `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Simulated,
    Ingested,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RRSeries {
    pub intervals: Vec<f64>,
    pub interval_labels: Vec<RhythmClass>,
    pub seed: u64,
}

impl RRSeries {
    pub fn len(&self) -> usize {
        self.intervals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intervals.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.intervals.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.intervals.is_empty() {
            return Err(Error::param("RR series is empty"));
        }
        if self.intervals.len() != self.interval_labels.len() {
            return Err(Error::param("RR labels length differs from interval count"));
        }
        if let Some(bad) = self
            .intervals
            .iter()
            .find(|&&rr| !(MIN_RR_S..=MAX_RR_S).contains(&rr))
        {
            return Err(Error::param(format!("RR interval {bad} outside [0.2, 3.0] s")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaveformRecord {
    pub samples: Vec<f64>,
    pub fs: f64,
    pub channel: Channel,
    pub sample_labels: Vec<RhythmClass>,
    pub source: Source,
}

impl WaveformRecord {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.fs
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::param("waveform has no samples"));
        }
        if self.samples.len() != self.sample_labels.len() {
            return Err(Error::param("sample label count differs from sample count"));
        }
        if !(self.fs > 0.0) {
            return Err(Error::param("sampling frequency must be positive"));
        }
        Ok(())
    }
}

/// Heart-rate model for one rhythm class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateParams {
    pub mean_bpm: f64,
    /// Beat-to-beat coefficient of variation of the interval.
    pub beat_cv: f64,
    /// Between-record spread of the mean rate.
    pub record_sd_bpm: f64,
    pub min_bpm: f64,
    pub max_bpm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassRateParams {
    pub nsr: RateParams,
    pub afib: RateParams,
    pub brady: RateParams,
    pub tachy: RateParams,
}

impl Default for ClassRateParams {
    fn default() -> Self {
        ClassRateParams {
            nsr: RateParams { mean_bpm: 70.0, beat_cv: 0.03, record_sd_bpm: 3.0, min_bpm: 62.0, max_bpm: 85.0 },
            afib: RateParams { mean_bpm: 90.0, beat_cv: 0.24, record_sd_bpm: 5.0, min_bpm: 75.0, max_bpm: 110.0 },
            brady: RateParams { mean_bpm: 50.0, beat_cv: 0.03, record_sd_bpm: 2.5, min_bpm: 42.0, max_bpm: 56.0 },
            tachy: RateParams { mean_bpm: 120.0, beat_cv: 0.03, record_sd_bpm: 5.0, min_bpm: 106.0, max_bpm: 140.0 },
        }
    }
}

impl ClassRateParams {
    pub fn get(&self, class: RhythmClass) -> &RateParams {
        match class {
            RhythmClass::Nsr => &self.nsr,
            RhythmClass::AFib => &self.afib,
            RhythmClass::Brady => &self.brady,
            RhythmClass::Tachy => &self.tachy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArtifactConfig {
    pub baseline_wander_amp: f64,
    pub baseline_wander_freq: f64,
    pub spike_prob: f64,
    pub noise_sd: f64,
    pub premature_beat_rate: f64,
}

impl ArtifactConfig {
    pub fn none() -> Self {
        ArtifactConfig {
            baseline_wander_amp: 0.0,
            baseline_wander_freq: 0.0,
            spike_prob: 0.0,
            noise_sd: 0.0,
            premature_beat_rate: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("baseline_wander_amp", self.baseline_wander_amp),
            ("baseline_wander_freq", self.baseline_wander_freq),
            ("spike_prob", self.spike_prob),
            ("noise_sd", self.noise_sd),
            ("premature_beat_rate", self.premature_beat_rate),
        ];
        for (name, v) in fields {
            if !(v >= 0.0) {
                return Err(Error::param(format!("{name} must be >= 0")));
            }
        }
        if self.spike_prob > 1.0 || self.premature_beat_rate > 1.0 {
            return Err(Error::param("probabilities must lie in [0, 1]"));
        }
        Ok(())
    }
}

impl Default for ArtifactConfig {
    fn default() -> Self {
        ArtifactConfig {
            baseline_wander_amp: 0.15,
            baseline_wander_freq: 0.25,
            spike_prob: 0.05,
            noise_sd: 0.05,
            premature_beat_rate: 0.03,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub n_episodes_per_class: usize,
    pub rr_per_record: usize,
    pub median_episode_len: usize,
    pub clean_to_artifact_ratio: f64,
    pub fs_ppg: f64,
    pub fs_ecg: f64,
    pub seed: u64,
    pub class_rate_params: ClassRateParams,
    /// Channel synthesized by [`simulate_dataset`].
    pub channel: Channel,
    /// Corruption applied to the artifact share of the dataset.
    pub artifacts: ArtifactConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n_episodes_per_class: 50,
            rr_per_record: 100,
            median_episode_len: 15,
            clean_to_artifact_ratio: 30.0,
            fs_ppg: 125.0,
            fs_ecg: 500.0,
            seed: 0,
            class_rate_params: ClassRateParams::default(),
            channel: Channel::Ppg,
            artifacts: ArtifactConfig::default(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rr_per_record == 0 || self.median_episode_len == 0 {
            return Err(Error::param("record and episode lengths must be positive"));
        }
        if !(self.clean_to_artifact_ratio >= 1.0) {
            return Err(Error::param("clean_to_artifact_ratio must be >= 1"));
        }
        if !(self.fs_ppg > 0.0 && self.fs_ecg > 0.0) {
            return Err(Error::param("sampling frequencies must be positive"));
        }
        self.artifacts.validate()
    }

    pub fn fs_for(&self, channel: Channel) -> f64 {
        match channel {
            Channel::Ppg => self.fs_ppg,
            Channel::EcgLeadI => self.fs_ecg,
        }
    }
}

/// Mixes a base seed with two stream indices.
pub fn derive_seed(base: u64, a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over the combined inputs
    let mut z = base
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-beat interval sampler for one rhythm at a record-specific mean rate.
struct RhythmSampler {
    class: RhythmClass,
    mean_interval: f64,
    cv: f64,
}

impl RhythmSampler {
    fn new<R: Rng>(class: RhythmClass, params: &ClassRateParams, rng: &mut R) -> Self {
        let p = params.get(class);
        let bpm = if p.record_sd_bpm > 0.0 {
            let n = Normal::new(p.mean_bpm, p.record_sd_bpm).expect("finite rate sd");
            n.sample(rng).clamp(p.min_bpm, p.max_bpm)
        } else {
            p.mean_bpm
        };
        RhythmSampler { class, mean_interval: 60.0 / bpm, cv: p.beat_cv }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        let rr = match self.class {
            // irregularly irregular: independent lognormal draws
            RhythmClass::AFib => {
                let sigma2 = (1.0 + self.cv * self.cv).ln();
                let mu = self.mean_interval.ln() - sigma2 / 2.0;
                LogNormal::new(mu, sigma2.sqrt()).expect("valid lognormal").sample(rng)
            }
            _ => {
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                self.mean_interval * (1.0 + self.cv * z)
            }
        };
        rr.clamp(MIN_RR_S, MAX_RR_S)
    }
}

/// Success probability of a geometric length distribution on {1, 2, ...} whose
/// median is `median`.
pub fn episode_length_p(median: usize) -> f64 {
    1.0 - 0.5f64.powf(1.0 / median as f64)
}

fn draw_episode_len<R: Rng>(median: usize, max: usize, rng: &mut R) -> usize {
    let geo = Geometric::new(episode_length_p(median)).expect("p in (0, 1]");
    let len = 1 + geo.sample(rng) as usize;
    len.min(max)
}

/// Generates `n` labeled RR intervals. Arrhythmic classes get one contiguous
/// episode embedded in an NSR background.
pub fn gen_rr(class: RhythmClass, n: usize, cfg: &SimConfig, seed: u64) -> Result<RRSeries> {
    if n == 0 {
        return Err(Error::param("RR interval count must be >= 1"));
    }
    if cfg.median_episode_len == 0 {
        return Err(Error::param("median_episode_len must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let background = RhythmSampler::new(RhythmClass::Nsr, &cfg.class_rate_params, &mut rng);
    let mut intervals = Vec::with_capacity(n);
    let mut labels = vec![RhythmClass::Nsr; n];

    let episode = if class.is_arrhythmic() {
        let len = draw_episode_len(cfg.median_episode_len, n, &mut rng);
        let start = rng.random_range(0..=n - len);
        let sampler = RhythmSampler::new(class, &cfg.class_rate_params, &mut rng);
        Some((start..start + len, sampler))
    } else {
        None
    };

    for i in 0..n {
        match &episode {
            Some((span, sampler)) if span.contains(&i) => {
                intervals.push(sampler.sample(&mut rng));
                labels[i] = class;
            }
            _ => intervals.push(background.sample(&mut rng)),
        }
    }
    Ok(RRSeries { intervals, interval_labels: labels, seed })
}

/// Intervals of a single rhythm filling at least `duration_s` seconds.
pub fn gen_rr_segment(
    class: RhythmClass,
    duration_s: f64,
    params: &ClassRateParams,
    seed: u64,
) -> Result<RRSeries> {
    if !(duration_s > 0.0) {
        return Err(Error::param("segment duration must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sampler = RhythmSampler::new(class, params, &mut rng);
    let mut intervals = Vec::new();
    let mut total = 0.0;
    while total < duration_s {
        let rr = sampler.sample(&mut rng);
        total += rr;
        intervals.push(rr);
    }
    let interval_labels = vec![class; intervals.len()];
    Ok(RRSeries { intervals, interval_labels, seed })
}

/// Replaces intervals with a premature beat: a shortened coupling interval
/// followed by a compensatory pause of equal total length.
pub fn apply_premature_beats(rr: &RRSeries, rate: f64, seed: u64) -> RRSeries {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = rr.clone();
    let mut i = 0;
    while i + 1 < out.intervals.len() {
        if rate > 0.0 && rng.random::<f64>() < rate {
            let total = out.intervals[i] + out.intervals[i + 1];
            let early = (out.intervals[i] * rng.random_range(0.55..0.75)).max(MIN_RR_S);
            let pause = (total - early).clamp(MIN_RR_S, MAX_RR_S);
            out.intervals[i] = early;
            out.intervals[i + 1] = pause;
            i += 2;
        } else {
            i += 1;
        }
    }
    out
}

/// One Gaussian bump of a beat template, positioned relative to the beat anchor.
#[derive(Debug, Clone, Copy)]
struct Wave {
    offset_s: f64,
    /// Extra offset proportional to sqrt(RR), for rate-dependent components.
    rr_offset_s: f64,
    amp: f64,
    width_s: f64,
}

impl Wave {
    fn center(&self, rr: f64) -> f64 {
        self.offset_s + self.rr_offset_s * rr.sqrt()
    }
}

const ECG_TEMPLATE: [Wave; 5] = [
    Wave { offset_s: -0.16, rr_offset_s: 0.0, amp: 0.12, width_s: 0.025 },
    Wave { offset_s: -0.028, rr_offset_s: 0.0, amp: -0.10, width_s: 0.010 },
    Wave { offset_s: 0.0, rr_offset_s: 0.0, amp: 1.0, width_s: 0.011 },
    Wave { offset_s: 0.03, rr_offset_s: 0.0, amp: -0.22, width_s: 0.011 },
    Wave { offset_s: 0.0, rr_offset_s: 0.30, amp: 0.30, width_s: 0.045 },
];

const PPG_TEMPLATE: [Wave; 2] = [
    Wave { offset_s: 0.18, rr_offset_s: 0.0, amp: 1.0, width_s: 0.07 },
    Wave { offset_s: 0.18, rr_offset_s: 0.24, amp: 0.45, width_s: 0.09 },
];

const NOMINAL_RR_S: f64 = 60.0 / 70.0;

fn template_peak(template: &[Wave]) -> f64 {
    // peak of the isolated template at the nominal rate, on a fine grid
    let eval = |t: f64| {
        template
            .iter()
            .map(|w| {
                let d = t - w.center(NOMINAL_RR_S);
                w.amp * (-0.5 * (d / w.width_s).powi(2)).exp()
            })
            .sum::<f64>()
    };
    (-600..=800)
        .map(|k| eval(k as f64 * 1e-3))
        .fold(f64::MIN, f64::max)
}

fn synthesize(
    rr: &RRSeries,
    fs: f64,
    channel: Channel,
    template: &[Wave],
    anchor_lead_s: f64,
) -> Result<WaveformRecord> {
    rr.validate()?;
    if !(fs > 0.0) {
        return Err(Error::param("sampling frequency must be positive"));
    }
    let duration = rr.duration_s();
    let n_samples = (duration * fs).round() as usize;
    if n_samples == 0 {
        return Err(Error::param("RR series too short for one sample"));
    }
    let norm = template_peak(template);
    let mut samples = vec![0.0; n_samples];
    let mut sample_labels = vec![RhythmClass::Nsr; n_samples];

    let mut onset = 0.0;
    for (&interval, &label) in rr.intervals.iter().zip(&rr.interval_labels) {
        let anchor = onset + anchor_lead_s;
        for w in template {
            let center = anchor + w.center(interval);
            let reach = 5.0 * w.width_s;
            let lo = (((center - reach) * fs).floor().max(0.0)) as usize;
            let hi = (((center + reach) * fs).ceil() as isize).min(n_samples as isize - 1);
            if hi < 0 {
                continue;
            }
            for (k, s) in samples.iter_mut().enumerate().take(hi as usize + 1).skip(lo) {
                let d = k as f64 / fs - center;
                *s += w.amp / norm * (-0.5 * (d / w.width_s).powi(2)).exp();
            }
        }
        let first = (onset * fs).round() as usize;
        let last = (((onset + interval) * fs).round() as usize).min(n_samples);
        for l in &mut sample_labels[first.min(n_samples)..last] {
            *l = label;
        }
        onset += interval;
    }

    Ok(WaveformRecord { samples, fs, channel, sample_labels, source: Source::Simulated })
}

/// Pulse wave: systolic peak plus dicrotic component per beat.
pub fn rr_to_ppg(rr: &RRSeries, fs: f64) -> Result<WaveformRecord> {
    synthesize(rr, fs, Channel::Ppg, &PPG_TEMPLATE, 0.0)
}

/// Lead I ECG: P-Q-R-S-T template per beat with the R peak `ECG_R_LEAD_S`
/// after each interval onset, so R-to-R spacing equals the RR series.
pub fn rr_to_ecg(rr: &RRSeries, fs: f64) -> Result<WaveformRecord> {
    synthesize(rr, fs, Channel::EcgLeadI, &ECG_TEMPLATE, ECG_R_LEAD_S)
}

pub const ECG_R_LEAD_S: f64 = 0.18;

pub fn rr_to_waveform(rr: &RRSeries, channel: Channel, fs: f64) -> Result<WaveformRecord> {
    match channel {
        Channel::Ppg => rr_to_ppg(rr, fs),
        Channel::EcgLeadI => rr_to_ecg(rr, fs),
    }
}

/// Local maxima above `threshold`, at least `refractory_s` apart (the larger wins).
pub fn detect_peaks(samples: &[f64], fs: f64, threshold: f64, refractory_s: f64) -> Vec<usize> {
    let refractory = (refractory_s * fs).round() as usize;
    let mut peaks: Vec<usize> = Vec::new();
    for i in 1..samples.len().saturating_sub(1) {
        let v = samples[i];
        if v < threshold || v < samples[i - 1] || v <= samples[i + 1] {
            continue;
        }
        match peaks.last_mut() {
            Some(last) if i - *last < refractory => {
                if v > samples[*last] {
                    *last = i;
                }
            }
            _ => peaks.push(i),
        }
    }
    peaks
}

/// Adds baseline wander, Gaussian noise and motion spikes. Labels are untouched.
pub fn inject_artifacts(w: &WaveformRecord, a: &ArtifactConfig, seed: u64) -> Result<WaveformRecord> {
    w.validate()?;
    a.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = w.clone();
    let (lo, hi) = w
        .samples
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };

    if a.baseline_wander_amp > 0.0 {
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let amp = a.baseline_wander_amp * span;
        for (k, s) in out.samples.iter_mut().enumerate() {
            let t = k as f64 / w.fs;
            *s += amp * (std::f64::consts::TAU * a.baseline_wander_freq * t + phase).sin();
        }
    }

    if a.noise_sd > 0.0 {
        let noise = Normal::new(0.0, a.noise_sd).map_err(|e| Error::param(e.to_string()))?;
        for s in out.samples.iter_mut() {
            *s += noise.sample(&mut rng);
        }
    }

    if a.spike_prob > 0.0 {
        let per_sample = a.spike_prob / w.fs;
        let width = (0.02 * w.fs).max(1.0);
        let n = out.samples.len();
        for k in 0..n {
            if rng.random::<f64>() >= per_sample {
                continue;
            }
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            let amp = sign * rng.random_range(1.0..3.0) * span;
            let reach = (4.0 * width) as usize;
            for j in k.saturating_sub(reach)..(k + reach + 1).min(n) {
                let d = (j as f64 - k as f64) / width;
                out.samples[j] += amp * (-0.5 * d * d).exp();
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimRecord {
    pub class: RhythmClass,
    pub artifact: bool,
    pub seed: u64,
    pub rr: RRSeries,
    pub waveform: WaveformRecord,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabeledDataset {
    pub records: Vec<SimRecord>,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn count_class(&self, class: RhythmClass) -> usize {
        self.records.iter().filter(|r| r.class == class).count()
    }

    pub fn artifact_count(&self) -> usize {
        self.records.iter().filter(|r| r.artifact).count()
    }
}

/// Number of artifact-corrupted records among `total` at the given clean:artifact ratio.
pub fn artifact_quota(total: usize, clean_to_artifact_ratio: f64) -> usize {
    (total as f64 / (clean_to_artifact_ratio + 1.0)).floor() as usize
}

const DATASET_CLASS_ORDER: [RhythmClass; 4] =
    [RhythmClass::AFib, RhythmClass::Brady, RhythmClass::Tachy, RhythmClass::Nsr];

/// `n_episodes_per_class` records for each arrhythmia plus as many NSR records,
/// with a fixed artifact share.
pub fn simulate_dataset(cfg: &SimConfig) -> Result<LabeledDataset> {
    cfg.validate()?;
    let fs = cfg.fs_for(cfg.channel);
    let mut plan = Vec::new();
    for (ci, &class) in DATASET_CLASS_ORDER.iter().enumerate() {
        for i in 0..cfg.n_episodes_per_class {
            plan.push((class, derive_seed(cfg.seed, ci as u64 + 1, i as u64)));
        }
    }

    let mut order: Vec<usize> = (0..plan.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 99, 0)));
    let mut corrupted = vec![false; plan.len()];
    for &idx in order.iter().take(artifact_quota(plan.len(), cfg.clean_to_artifact_ratio)) {
        corrupted[idx] = true;
    }

    let records = plan
        .into_iter()
        .zip(corrupted)
        .map(|((class, seed), artifact)| {
            let mut rr = gen_rr(class, cfg.rr_per_record, cfg, seed)?;
            if artifact && cfg.artifacts.premature_beat_rate > 0.0 {
                rr = apply_premature_beats(&rr, cfg.artifacts.premature_beat_rate, seed ^ 0x5EED);
            }
            let mut waveform = rr_to_waveform(&rr, cfg.channel, fs)?;
            if artifact {
                waveform = inject_artifacts(&waveform, &cfg.artifacts, seed ^ 0xA57)?;
            }
            Ok(SimRecord { class, artifact, seed, rr, waveform })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LabeledDataset { records })
}

/// Writes the CSV form with a `fs=..,channel=..` header; amplitudes use the
/// shortest round-trip decimal form.
pub fn write_waveform_csv<W: Write>(w: &WaveformRecord, out: W) -> Result<()> {
    let mut out = BufWriter::new(out);
    writeln!(out, "fs={},channel={}", w.fs, w.channel.as_str())?;
    for (s, l) in w.samples.iter().zip(&w.sample_labels) {
        writeln!(out, "{},{}", s, l.csv_label())?;
    }
    out.flush()?;
    Ok(())
}

pub fn save_waveform_csv(w: &WaveformRecord, path: &Path) -> Result<()> {
    write_waveform_csv(w, fs::File::create(path)?)
}

fn parse_header(line: &str, line_no: usize) -> Result<(Option<f64>, Option<Channel>)> {
    let mut fs_val = None;
    let mut channel = None;
    for part in line.split(',') {
        let (key, value) = part.split_once('=').ok_or_else(|| Error::Parse {
            line: line_no,
            message: format!("malformed header field `{part}`"),
        })?;
        match key.trim() {
            "fs" => {
                fs_val = Some(value.trim().parse::<f64>().map_err(|e| Error::Parse {
                    line: line_no,
                    message: format!("bad fs `{value}`: {e}"),
                })?)
            }
            "channel" => {
                channel = Some(value.parse::<Channel>().map_err(|e| Error::Parse {
                    line: line_no,
                    message: e.to_string(),
                })?)
            }
            other => {
                return Err(Error::Parse { line: line_no, message: format!("unknown header key `{other}`") })
            }
        }
    }
    Ok((fs_val, channel))
}

/// Parses a waveform CSV. Explicit `fs` / `channel` override the header; at
/// least one of the two sources must provide each.
pub fn parse_waveform_csv(text: &str, fs: Option<f64>, channel: Option<Channel>) -> Result<WaveformRecord> {
    let mut header = (None, None);
    let mut samples = Vec::new();
    let mut labels = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if idx == 0 && line.starts_with("fs=") {
            header = parse_header(line, line_no)?;
            continue;
        }
        let (amp, label) = match line.split_once(',') {
            Some((a, l)) => (a, Some(l)),
            None => (line, None),
        };
        let value = amp.trim().parse::<f64>().map_err(|_| Error::Parse {
            line: line_no,
            message: format!("`{amp}` is not a number"),
        })?;
        if !value.is_finite() {
            return Err(Error::Parse { line: line_no, message: "non-finite amplitude".into() });
        }
        let class = match label {
            Some(l) => l.parse::<RhythmClass>().map_err(|e| Error::Parse {
                line: line_no,
                message: e.to_string(),
            })?,
            None => RhythmClass::Nsr,
        };
        samples.push(value);
        labels.push(class);
    }
    if samples.is_empty() {
        return Err(Error::param("waveform file contains no samples"));
    }
    let channel = channel
        .or(header.1)
        .ok_or_else(|| Error::param("channel not given and no header present"))?;
    let fs = fs.or(header.0).unwrap_or_else(|| channel.default_fs());
    let rec = WaveformRecord { samples, fs, channel, sample_labels: labels, source: Source::Ingested };
    rec.validate()?;
    Ok(rec)
}

pub fn load_waveform_csv(path: &Path, fs: Option<f64>, channel: Option<Channel>) -> Result<WaveformRecord> {
    let text = fs::read_to_string(path)?;
    parse_waveform_csv(&text, fs, channel)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub class: RhythmClass,
    pub artifact: bool,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub channel: Channel,
    pub fs: f64,
    pub records: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes one CSV per record plus `manifest.json` into `dir`.
pub fn write_dataset(ds: &LabeledDataset, cfg: &SimConfig, dir: &Path) -> Result<DatasetManifest> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(ds.len());
    for (i, rec) in ds.records.iter().enumerate() {
        let name = format!("record_{i:04}_{}.csv", rec.class.csv_label().to_ascii_lowercase());
        save_waveform_csv(&rec.waveform, &dir.join(&name))?;
        entries.push(ManifestEntry { path: name, class: rec.class, artifact: rec.artifact, seed: rec.seed });
    }
    let manifest = DatasetManifest {
        version: 1,
        channel: cfg.channel,
        fs: cfg.fs_for(cfg.channel),
        records: entries,
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Loads every record listed in `dir/manifest.json`, paired with its manifest entry.
pub fn read_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<WaveformRecord>)> {
    let manifest: DatasetManifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    let records = manifest
        .records
        .iter()
        .map(|e| {
            let p: PathBuf = dir.join(&e.path);
            load_waveform_csv(&p, Some(manifest.fs), Some(manifest.channel))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, records))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean(v: &[f64]) -> f64 {
        v.iter().sum::<f64>() / v.len() as f64
    }

    #[test]
    fn nsr_series_is_all_nsr_at_normal_rate() {
        let rr = gen_rr(RhythmClass::Nsr, 100, &SimConfig::default(), 1).unwrap();
        assert_eq!(rr.len(), 100);
        assert!(rr.interval_labels.iter().all(|&l| l == RhythmClass::Nsr));
        let hr = 60.0 / mean(&rr.intervals);
        assert!((60.0..=100.0).contains(&hr), "hr {hr}");
        rr.validate().unwrap();
    }

    #[test]
    fn brady_series_contains_slow_run() {
        let rr = gen_rr(RhythmClass::Brady, 100, &SimConfig::default(), 1).unwrap();
        let run: Vec<f64> = rr
            .intervals
            .iter()
            .zip(&rr.interval_labels)
            .filter(|(_, &l)| l == RhythmClass::Brady)
            .map(|(&i, _)| i)
            .collect();
        assert!(!run.is_empty());
        assert!(mean(&run) > 1.0);
        // the run is contiguous
        let first = rr.interval_labels.iter().position(|&l| l == RhythmClass::Brady).unwrap();
        assert!(rr.interval_labels[first..first + run.len()].iter().all(|&l| l == RhythmClass::Brady));
    }

    #[test]
    fn zero_intervals_is_parameter_error() {
        assert!(matches!(gen_rr(RhythmClass::AFib, 0, &SimConfig::default(), 1), Err(Error::Parameter(_))));
        let empty = RRSeries { intervals: vec![], interval_labels: vec![], seed: 0 };
        assert!(rr_to_ecg(&empty, 500.0).is_err());
    }

    #[test]
    fn ppg_length_is_duration_times_fs() {
        let rr = RRSeries { intervals: vec![0.8; 100], interval_labels: vec![RhythmClass::Nsr; 100], seed: 0 };
        let w = rr_to_ppg(&rr, 125.0).unwrap();
        assert_eq!(w.len(), 10_000);
        assert_eq!(w.sample_labels.len(), w.len());
    }

    #[test]
    fn constant_rr_ppg_is_periodic() {
        let rr = RRSeries { intervals: vec![0.8; 40], interval_labels: vec![RhythmClass::Nsr; 40], seed: 0 };
        let w = rr_to_ppg(&rr, 125.0).unwrap();
        let x = &w.samples[200..3800];
        let m = mean(x);
        let ac = |lag: usize| -> f64 {
            (0..x.len() - lag).map(|i| (x[i] - m) * (x[i + lag] - m)).sum::<f64>() / (x.len() - lag) as f64
        };
        // period is 0.8 s = 100 samples
        let best = (50..150).max_by(|&a, &b| ac(a).partial_cmp(&ac(b)).unwrap()).unwrap();
        assert_eq!(best, 100);
    }

    #[test]
    fn ecg_r_peaks_match_interval_count() {
        let cfg = SimConfig::default();
        for (seed, class) in RhythmClass::ALL.iter().enumerate() {
            let rr = gen_rr(*class, 100, &cfg, seed as u64).unwrap();
            let w = rr_to_ecg(&rr, 500.0).unwrap();
            let peaks = detect_peaks(&w.samples, w.fs, 0.5, 0.15);
            let diff = peaks.len() as i64 - rr.len() as i64;
            assert!(diff.abs() <= 1, "{class}: {} peaks vs {} intervals", peaks.len(), rr.len());
        }
    }

    #[test]
    fn ecg_peak_is_unit() {
        let rr = RRSeries { intervals: vec![NOMINAL_RR_S; 10], interval_labels: vec![RhythmClass::Nsr; 10], seed: 0 };
        let w = rr_to_ecg(&rr, 500.0).unwrap();
        let max = w.samples.iter().cloned().fold(f64::MIN, f64::max);
        assert!((max - 1.0).abs() < 0.02, "max {max}");
    }

    #[test]
    fn labels_partition_samples() {
        let rr = gen_rr(RhythmClass::Tachy, 100, &SimConfig::default(), 3).unwrap();
        let w = rr_to_ppg(&rr, 125.0).unwrap();
        let tachy = w.sample_labels.iter().filter(|&&l| l == RhythmClass::Tachy).count();
        let nsr = w.sample_labels.iter().filter(|&&l| l == RhythmClass::Nsr).count();
        assert_eq!(tachy + nsr, w.len());
        assert!(tachy > 0);
    }

    #[test]
    fn zero_artifacts_is_identity_and_seeded() {
        let rr = gen_rr(RhythmClass::AFib, 50, &SimConfig::default(), 5).unwrap();
        let w = rr_to_ppg(&rr, 125.0).unwrap();
        assert_eq!(inject_artifacts(&w, &ArtifactConfig::none(), 9).unwrap(), w);
        let a = ArtifactConfig::default();
        let x = inject_artifacts(&w, &a, 11).unwrap();
        let y = inject_artifacts(&w, &a, 11).unwrap();
        assert_eq!(x, y);
        assert_eq!(x.sample_labels, w.sample_labels);
        assert_ne!(x.samples, w.samples);
    }

    #[test]
    fn noise_sd_is_respected() {
        let rr = RRSeries { intervals: vec![0.8; 120], interval_labels: vec![RhythmClass::Nsr; 120], seed: 0 };
        let w = rr_to_ppg(&rr, 125.0).unwrap();
        assert!(w.len() >= 10_000);
        let a = ArtifactConfig { noise_sd: 0.1, ..ArtifactConfig::none() };
        let n = inject_artifacts(&w, &a, 2).unwrap();
        let d: Vec<f64> = n.samples.iter().zip(&w.samples).map(|(a, b)| a - b).collect();
        let m = mean(&d);
        let sd = (d.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (d.len() - 1) as f64).sqrt();
        assert!((sd - 0.1).abs() <= 0.01, "sd {sd}");
    }

    #[test]
    fn premature_beats_preserve_duration() {
        let rr = gen_rr(RhythmClass::Nsr, 100, &SimConfig::default(), 8).unwrap();
        let p = apply_premature_beats(&rr, 0.2, 1);
        assert_ne!(p.intervals, rr.intervals);
        assert!((p.duration_s() - rr.duration_s()).abs() < 1e-6);
        p.validate().unwrap();
    }

    #[test]
    fn empty_and_balanced_datasets() {
        let cfg = SimConfig { n_episodes_per_class: 0, ..SimConfig::default() };
        assert!(simulate_dataset(&cfg).unwrap().is_empty());
        let cfg = SimConfig { n_episodes_per_class: 4, rr_per_record: 20, ..SimConfig::default() };
        let ds = simulate_dataset(&cfg).unwrap();
        for c in RhythmClass::ALL {
            assert_eq!(ds.count_class(c), 4);
        }
    }

    #[test]
    fn csv_parse_errors_and_defaults() {
        let w = parse_waveform_csv("0.1\n0.2\n0.3", Some(125.0), Some(Channel::Ppg)).unwrap();
        assert_eq!(w.len(), 3);
        assert_eq!(w.source, Source::Ingested);
        assert!(w.sample_labels.iter().all(|&l| l == RhythmClass::Nsr));
        match parse_waveform_csv("abc", Some(125.0), Some(Channel::Ppg)) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
        assert!(matches!(parse_waveform_csv("", Some(1.0), Some(Channel::Ppg)), Err(Error::Parameter(_))));
        let w = parse_waveform_csv("fs=250,channel=ECG1\n1.5,AFIB\n-0.5,TACHY\n", None, None).unwrap();
        assert_eq!(w.fs, 250.0);
        assert_eq!(w.channel, Channel::EcgLeadI);
        assert_eq!(w.sample_labels, vec![RhythmClass::AFib, RhythmClass::Tachy]);
        let w = parse_waveform_csv("fs=250,channel=ECG1\n1.5\n", Some(500.0), None).unwrap();
        assert_eq!(w.fs, 500.0);
        match parse_waveform_csv("fs=250,channel=ECG1\n1.5\n2.0,FLUTTER\n", None, None) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
