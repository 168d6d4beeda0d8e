use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal_sim::RhythmClass;
use crate::spectro::{SpectroImage, DEFAULT_IMAGE_SIZE};

pub const CONV1_FILTERS: usize = 8;
pub const CONV2_FILTERS: usize = 16;
const K: usize = 3;

/// Class list for an `n`-way head: NSR first, then arrhythmias in enum order.
pub fn default_classes(n_classes: usize) -> Result<Vec<RhythmClass>> {
    match n_classes {
        2 => Ok(vec![RhythmClass::Nsr, RhythmClass::AFib]),
        4 => Ok(RhythmClass::ALL.to_vec()),
        n => Err(Error::param(format!("n_classes must be 2 or 4, got {n}"))),
    }
}

/// All trainable tensors, flat and row-major. Also used for gradients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub conv1_w: Vec<f64>,
    pub conv1_b: Vec<f64>,
    pub conv2_w: Vec<f64>,
    pub conv2_b: Vec<f64>,
    pub dense_w: Vec<f64>,
    pub dense_b: Vec<f64>,
}

impl Params {
    fn zeros(n_classes: usize, input_size: usize) -> Self {
        let flat = dense_inputs(input_size);
        Params {
            conv1_w: vec![0.0; CONV1_FILTERS * K * K],
            conv1_b: vec![0.0; CONV1_FILTERS],
            conv2_w: vec![0.0; CONV2_FILTERS * CONV1_FILTERS * K * K],
            conv2_b: vec![0.0; CONV2_FILTERS],
            dense_w: vec![0.0; n_classes * flat],
            dense_b: vec![0.0; n_classes],
        }
    }

    pub fn tensors(&self) -> [(&'static str, &Vec<f64>); 6] {
        [
            ("conv1_w", &self.conv1_w),
            ("conv1_b", &self.conv1_b),
            ("conv2_w", &self.conv2_w),
            ("conv2_b", &self.conv2_b),
            ("dense_w", &self.dense_w),
            ("dense_b", &self.dense_b),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<f64>; 6] {
        [
            &mut self.conv1_w,
            &mut self.conv1_b,
            &mut self.conv2_w,
            &mut self.conv2_b,
            &mut self.dense_w,
            &mut self.dense_b,
        ]
    }

    pub fn len(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, flat: usize) -> f64 {
        let mut i = flat;
        for (_, t) in self.tensors() {
            if i < t.len() {
                return t[i];
            }
            i -= t.len();
        }
        panic!("parameter index {flat} out of range")
    }

    pub fn set(&mut self, flat: usize, v: f64) {
        let mut i = flat;
        for t in self.tensors_mut() {
            if i < t.len() {
                t[i] = v;
                return;
            }
            i -= t.len();
        }
        panic!("parameter index {flat} out of range")
    }

    fn axpy(&mut self, alpha: f64, other: &Params) {
        for (dst, (_, src)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += alpha * s;
            }
        }
    }
}

pub type Gradients = Params;

fn dense_inputs(input_size: usize) -> usize {
    let s = input_size / 4;
    CONV2_FILTERS * s * s
}

/// conv3×3(8) → relu → maxpool2 → conv3×3(16) → relu → maxpool2 → dense → softmax.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub classes: Vec<RhythmClass>,
    pub input_size: usize,
    pub seed: u64,
    pub params: Params,
    /// Fixed per-pixel offset subtracted from every input; empty means none.
    /// Set from the training set on the first call to `train`.
    #[serde(default)]
    pub input_mean: Vec<f64>,
}

pub fn init_model(n_classes: usize, seed: u64) -> Result<Model> {
    Model::init(default_classes(n_classes)?, DEFAULT_IMAGE_SIZE, seed)
}

impl Model {
    /// He-uniform weights, zero biases.
    pub fn init(classes: Vec<RhythmClass>, input_size: usize, seed: u64) -> Result<Model> {
        if classes.len() != 2 && classes.len() != 4 {
            return Err(Error::param(format!("n_classes must be 2 or 4, got {}", classes.len())));
        }
        if input_size < 8 || !input_size.is_multiple_of(4) {
            return Err(Error::param("input size must be a multiple of 4 and at least 8"));
        }
        let mut params = Params::zeros(classes.len(), input_size);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |w: &mut Vec<f64>, fan_in: usize| {
            let limit = (6.0 / fan_in as f64).sqrt();
            w.iter_mut().for_each(|v| *v = rng.random_range(-limit..limit));
        };
        fill(&mut params.conv1_w, K * K);
        fill(&mut params.conv2_w, CONV1_FILTERS * K * K);
        fill(&mut params.dense_w, dense_inputs(input_size));
        Ok(Model { classes, input_size, seed, params, input_mean: Vec::new() })
    }

    pub fn zeros(classes: Vec<RhythmClass>, input_size: usize) -> Model {
        let params = Params::zeros(classes.len(), input_size);
        Model { classes, input_size, seed: 0, params, input_mean: Vec::new() }
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_index(&self, class: RhythmClass) -> Option<usize> {
        self.classes.iter().position(|&c| c == class)
    }

    /// Checks every tensor against the layer stack.
    pub fn validate(&self) -> Result<()> {
        let expected = Params::zeros(self.classes.len(), self.input_size);
        for ((name, have), (_, want)) in self.params.tensors().iter().zip(expected.tensors()) {
            if have.len() != want.len() {
                return Err(Error::Shape(format!("{name}: {} values, expected {}", have.len(), want.len())));
            }
        }
        if !self.input_mean.is_empty() && self.input_mean.len() != self.input_size * self.input_size {
            return Err(Error::Shape("input_mean does not match the input size".into()));
        }
        Ok(())
    }

    fn check_image(&self, img: &SpectroImage) -> Result<()> {
        if img.height != self.input_size || img.width != self.input_size || img.pixels.len() != img.height * img.width {
            return Err(Error::Shape(format!(
                "expected {0}x{0} image, got {1}x{2}",
                self.input_size, img.height, img.width
            )));
        }
        Ok(())
    }

    pub fn logits(&self, img: &SpectroImage) -> Result<Vec<f64>> {
        self.check_image(img)?;
        Ok(self.forward_cached(&self.centered(&img.pixels)).logits)
    }

    fn centered<'a>(&self, input: &'a [f64]) -> std::borrow::Cow<'a, [f64]> {
        if self.input_mean.is_empty() {
            input.into()
        } else {
            input.iter().zip(&self.input_mean).map(|(x, m)| x - m).collect::<Vec<_>>().into()
        }
    }

    /// `input` must already be centered.
    fn forward_cached(&self, input: &[f64]) -> Activations {
        let s = self.input_size;
        let p = &self.params;
        let z1 = conv3x3_same(input, 1, s, &p.conv1_w, &p.conv1_b, CONV1_FILTERS);
        let a1: Vec<f64> = z1.iter().map(|v| v.max(0.0)).collect();
        let (p1, arg1) = maxpool2(&a1, CONV1_FILTERS, s);
        let z2 = conv3x3_same(&p1, CONV1_FILTERS, s / 2, &p.conv2_w, &p.conv2_b, CONV2_FILTERS);
        let a2: Vec<f64> = z2.iter().map(|v| v.max(0.0)).collect();
        let (p2, arg2) = maxpool2(&a2, CONV2_FILTERS, s / 2);
        let flat = p2.len();
        let logits = (0..self.n_classes())
            .map(|k| {
                let row = &p.dense_w[k * flat..(k + 1) * flat];
                p.dense_b[k] + row.iter().zip(&p2).map(|(w, x)| w * x).sum::<f64>()
            })
            .collect();
        Activations { z1, p1, arg1, z2, p2, arg2, logits }
    }

    /// Adds this sample's gradient of `weight · CE(softmax(logits), label)` into `g`.
    fn backward(&self, input: &[f64], act: &Activations, label: usize, weight: f64, g: &mut Gradients) {
        let s = self.input_size;
        let p = &self.params;
        let probs = softmax(&act.logits);
        let flat = act.p2.len();
        let mut dp2 = vec![0.0; flat];
        for k in 0..self.n_classes() {
            let d = weight * (probs[k] - if k == label { 1.0 } else { 0.0 });
            g.dense_b[k] += d;
            let row = &p.dense_w[k * flat..(k + 1) * flat];
            let grow = &mut g.dense_w[k * flat..(k + 1) * flat];
            for i in 0..flat {
                grow[i] += d * act.p2[i];
                dp2[i] += d * row[i];
            }
        }
        let mut dz2 = vec![0.0; act.z2.len()];
        for (i, &src) in act.arg2.iter().enumerate() {
            if act.z2[src] > 0.0 {
                dz2[src] += dp2[i];
            }
        }
        let dp1 = conv3x3_same_backward(
            &act.p1,
            CONV1_FILTERS,
            s / 2,
            &p.conv2_w,
            CONV2_FILTERS,
            &dz2,
            &mut g.conv2_w,
            &mut g.conv2_b,
            true,
        );
        let mut dz1 = vec![0.0; act.z1.len()];
        for (i, &src) in act.arg1.iter().enumerate() {
            if act.z1[src] > 0.0 {
                dz1[src] += dp1[i];
            }
        }
        conv3x3_same_backward(input, 1, s, &p.conv1_w, CONV1_FILTERS, &dz1, &mut g.conv1_w, &mut g.conv1_b, false);
    }

    pub fn apply_sgd(&mut self, grads: &Gradients, lr: f64) {
        self.params.axpy(-lr, grads);
    }
}

struct Activations {
    z1: Vec<f64>,
    p1: Vec<f64>,
    arg1: Vec<usize>,
    z2: Vec<f64>,
    p2: Vec<f64>,
    arg2: Vec<usize>,
    logits: Vec<f64>,
}

/// Zero-padded 3×3 convolution (cross-correlation), square `size`, channel-major.
fn conv3x3_same(input: &[f64], c_in: usize, size: usize, w: &[f64], b: &[f64], c_out: usize) -> Vec<f64> {
    let plane = size * size;
    let mut out = vec![0.0; c_out * plane];
    for o in 0..c_out {
        let dst = &mut out[o * plane..(o + 1) * plane];
        dst.iter_mut().for_each(|v| *v = b[o]);
        for i in 0..c_in {
            let src = &input[i * plane..(i + 1) * plane];
            for ky in 0..K {
                for kx in 0..K {
                    let wv = w[((o * c_in + i) * K + ky) * K + kx];
                    let (y0, y1) = valid_range(ky, size);
                    let (x0, x1) = valid_range(kx, size);
                    for y in y0..y1 {
                        let sy = y + ky - 1;
                        let drow = &mut dst[y * size + x0..y * size + x1];
                        let srow = &src[sy * size + x0 + kx - 1..sy * size + x1 + kx - 1];
                        for (d, s) in drow.iter_mut().zip(srow) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Output rows (or columns) whose tap `k` lands inside the unpadded input.
fn valid_range(k: usize, size: usize) -> (usize, usize) {
    match k {
        0 => (1, size),
        1 => (0, size),
        _ => (0, size - 1),
    }
}

#[allow(clippy::too_many_arguments)]
fn conv3x3_same_backward(
    input: &[f64],
    c_in: usize,
    size: usize,
    w: &[f64],
    c_out: usize,
    dout: &[f64],
    gw: &mut [f64],
    gb: &mut [f64],
    want_input_grad: bool,
) -> Vec<f64> {
    let plane = size * size;
    let mut din = if want_input_grad { vec![0.0; c_in * plane] } else { Vec::new() };
    for o in 0..c_out {
        let d = &dout[o * plane..(o + 1) * plane];
        gb[o] += d.iter().sum::<f64>();
        for i in 0..c_in {
            let src = &input[i * plane..(i + 1) * plane];
            for ky in 0..K {
                for kx in 0..K {
                    let widx = ((o * c_in + i) * K + ky) * K + kx;
                    let wv = w[widx];
                    let (y0, y1) = valid_range(ky, size);
                    let (x0, x1) = valid_range(kx, size);
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let sy = y + ky - 1;
                        let start = sy * size + x0 + kx - 1;
                        let drow = &d[y * size + x0..y * size + x1];
                        let srow = &src[start..start + x1 - x0];
                        acc += drow.iter().zip(srow).map(|(a, b)| a * b).sum::<f64>();
                        if want_input_grad {
                            let dst = &mut din[i * plane + start..i * plane + start + x1 - x0];
                            for (t, dv) in dst.iter_mut().zip(drow) {
                                *t += wv * dv;
                            }
                        }
                    }
                    gw[widx] += acc;
                }
            }
        }
    }
    din
}

/// 2×2 max pooling; also returns the source index of each output.
fn maxpool2(input: &[f64], channels: usize, size: usize) -> (Vec<f64>, Vec<usize>) {
    let half = size / 2;
    let mut out = Vec::with_capacity(channels * half * half);
    let mut arg = Vec::with_capacity(channels * half * half);
    for c in 0..channels {
        let base = c * size * size;
        for y in 0..half {
            for x in 0..half {
                let mut best = base + 2 * y * size + 2 * x;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * y + dy) * size + 2 * x + dx;
                    if input[idx] > input[best] {
                        best = idx;
                    }
                }
                out.push(input[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `-log softmax(logits)[label]`, computed via log-sum-exp.
pub fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
    lse - logits[label]
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// One probability row per image.
    pub probabilities: Vec<Vec<f64>>,
    pub seconds_per_image: f64,
}

pub fn forward(m: &Model, batch: &[SpectroImage]) -> Result<ForwardOutput> {
    for img in batch {
        m.check_image(img)?;
    }
    let start = Instant::now();
    let probabilities = batch
        .iter()
        .map(|img| softmax(&m.forward_cached(&m.centered(&img.pixels)).logits))
        .collect();
    let elapsed = start.elapsed().as_secs_f64();
    Ok(ForwardOutput {
        probabilities,
        seconds_per_image: if batch.is_empty() { 0.0 } else { elapsed / batch.len() as f64 },
    })
}

/// Mean softmax cross-entropy over the batch and its gradient.
pub fn loss_and_grads(m: &Model, batch: &[SpectroImage], labels: &[usize]) -> Result<(f64, Gradients)> {
    if batch.len() != labels.len() {
        return Err(Error::Shape("image and label counts differ".into()));
    }
    if batch.is_empty() {
        return Err(Error::param("empty batch"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= m.n_classes()) {
        return Err(Error::param(format!("label {bad} out of range")));
    }
    let mut grads = Params::zeros(m.n_classes(), m.input_size);
    let weight = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for (img, &label) in batch.iter().zip(labels) {
        m.check_image(img)?;
        let input = m.centered(&img.pixels);
        let act = m.forward_cached(&input);
        loss += cross_entropy(&act.logits, label);
        m.backward(&input, &act, label, weight, &mut grads);
    }
    Ok((loss * weight, grads))
}

pub(crate) fn batch_loss(m: &Model, batch: &[SpectroImage], labels: &[usize]) -> f64 {
    batch
        .iter()
        .zip(labels)
        .map(|(img, &l)| cross_entropy(&m.forward_cached(&m.centered(&img.pixels)).logits, l))
        .sum::<f64>()
        / batch.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub coordinates: Vec<usize>,
}

/// Compares analytic gradients with central differences on `n_coords`
/// parameters sampled per `seed`. Relative error is `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn grad_check(
    m: &Model,
    batch: &[SpectroImage],
    labels: &[usize],
    eps: f64,
    n_coords: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    if !(eps > 0.0) {
        return Err(Error::param("finite-difference step must be positive"));
    }
    if batch.len() > 4 {
        return Err(Error::param("gradient check takes at most 4 images"));
    }
    let (_, analytic) = loss_and_grads(m, batch, labels)?;
    let total = m.params.len();
    let coordinates = sample_coordinates(&m.params, n_coords.min(total), seed);
    let mut probe = m.clone();
    let mut worst: f64 = 0.0;
    for &c in &coordinates {
        let orig = probe.params.get(c);
        probe.params.set(c, orig + eps);
        let up = batch_loss(&probe, batch, labels);
        probe.params.set(c, orig - eps);
        let down = batch_loss(&probe, batch, labels);
        probe.params.set(c, orig);
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic.get(c);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(GradCheckReport { max_relative_error: worst, coordinates })
}

/// Deterministic sample that covers every tensor, then fills the rest uniformly.
fn sample_coordinates(p: &Params, n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = p.len();
    let mut chosen = std::collections::BTreeSet::new();
    let mut offset = 0;
    for (_, t) in p.tensors() {
        if chosen.len() < n {
            chosen.insert(offset + rng.random_range(0..t.len()));
        }
        offset += t.len();
    }
    while chosen.len() < n {
        chosen.insert(rng.random_range(0..total));
    }
    chosen.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(seed: u64) -> SpectroImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SpectroImage {
            height: 64,
            width: 64,
            pixels: (0..64 * 64).map(|_| rng.random::<f64>()).collect(),
            label: None,
        }
    }

    #[test]
    fn init_is_seeded_with_zero_bias() {
        let a = init_model(4, 3).unwrap();
        let b = init_model(4, 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.params, init_model(4, 4).unwrap().params);
        assert!(a.params.conv1_b.iter().chain(&a.params.conv2_b).chain(&a.params.dense_b).all(|&v| v == 0.0));
        assert!(init_model(3, 1).is_err());
        a.validate().unwrap();
        assert_eq!(a.params.len(), 72 + 8 + 1152 + 16 + 4 * 4096 + 4);
    }

    #[test]
    fn zero_model_is_uniform() {
        let m = Model::zeros(default_classes(4).unwrap(), 64);
        let blank = SpectroImage { height: 64, width: 64, pixels: vec![0.0; 4096], label: None };
        let out = forward(&m, &[blank]).unwrap();
        for p in &out.probabilities[0] {
            assert!((p - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_rows_are_distributions() {
        let m = init_model(4, 9).unwrap();
        let batch: Vec<_> = (0..5).map(image).collect();
        let out = forward(&m, &batch).unwrap();
        assert_eq!(out.probabilities.len(), 5);
        for row in &out.probabilities {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
        }
        let wrong = SpectroImage { height: 32, width: 32, pixels: vec![0.0; 1024], label: None };
        assert!(matches!(forward(&m, &[wrong]), Err(Error::Shape(_))));
    }

    #[test]
    fn loss_limits() {
        assert!((cross_entropy(&[0.0; 4], 2) - 4f64.ln()).abs() < 1e-12);
        assert!(cross_entropy(&[50.0, -50.0, -50.0, -50.0], 0) <= 1e-6);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let m = init_model(4, 21).unwrap();
        let batch: Vec<_> = (0..2).map(|s| image(s + 100)).collect();
        let report = grad_check(&m, &batch, &[1, 3], 1e-5, 120, 5).unwrap();
        assert_eq!(report.coordinates.len(), 120);
        assert!(report.max_relative_error < 1e-4, "{}", report.max_relative_error);
        let again = grad_check(&m, &batch, &[1, 3], 1e-5, 120, 5).unwrap();
        assert_eq!(report.coordinates, again.coordinates);
        assert!(grad_check(&m, &batch, &[1, 3], 0.0, 10, 5).is_err());
    }
}
