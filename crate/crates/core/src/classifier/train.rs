use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{report_from_probabilities, MetricsReport};
use super::model::{batch_loss, forward, loss_and_grads, Model, Params, CONV1_FILTERS, CONV2_FILTERS};
use crate::error::{Error, Result};
use crate::signal_sim::{RhythmClass, WaveformRecord};
use crate::spectro::{segment_windows, SpectroConfig, SpectroImage, Spectrogrammer, Window};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Train / validation / test fractions.
    pub split: [f64; 3],
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { learning_rate: 0.05, batch_size: 32, epochs: 15, seed: 0, split: [0.7, 0.15, 0.15] }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::param("learning_rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::param("batch_size must be positive"));
        }
        if self.split.iter().any(|&f| !(f > 0.0)) || (self.split.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::param("split fractions must be positive and sum to 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean cross-entropy over the training set after the epoch.
    pub loss: f64,
    pub accuracy: f64,
}

fn labels_for(m: &Model, images: &[SpectroImage]) -> Result<Vec<usize>> {
    images
        .iter()
        .map(|img| {
            let class = img.label.ok_or_else(|| Error::param("training image without label"))?;
            m.class_index(class)
                .ok_or_else(|| Error::param(format!("label {class} not among model classes")))
        })
        .collect()
}

fn accuracy(m: &Model, images: &[SpectroImage], labels: &[usize]) -> Result<f64> {
    let out = forward(m, images)?;
    let hits = out
        .probabilities
        .iter()
        .zip(labels)
        .filter(|(row, &l)| row.iter().enumerate().all(|(k, &p)| k == l || p < row[l]))
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Minibatch SGD with a fixed learning rate and per-epoch shuffles drawn from `cfg.seed`.
pub fn train(model: &Model, data: &[SpectroImage], cfg: &TrainConfig) -> Result<(Model, Vec<EpochStats>)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::param("training set is empty"));
    }
    let labels = labels_for(model, data)?;
    let mut distinct = labels.clone();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::param("training set must contain at least two classes"));
    }
    let mut m = model.clone();
    if cfg.epochs > 0 && m.input_mean.is_empty() {
        let mut mean = vec![0.0; m.input_size * m.input_size];
        for img in data {
            for (acc, p) in mean.iter_mut().zip(&img.pixels) {
                *acc += p;
            }
        }
        mean.iter_mut().for_each(|v| *v /= data.len() as f64);
        m.input_mean = mean;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<SpectroImage> = chunk.iter().map(|&i| data[i].clone()).collect();
            let batch_labels: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let (_, grads) = loss_and_grads(&m, &batch, &batch_labels)?;
            m.apply_sgd(&grads, cfg.learning_rate);
        }
        history.push(EpochStats {
            epoch: epoch + 1,
            loss: batch_loss(&m, data, &labels),
            accuracy: accuracy(&m, data, &labels)?,
        });
    }
    Ok((m, history))
}

pub fn evaluate(m: &Model, test: &[SpectroImage]) -> Result<MetricsReport> {
    if test.is_empty() {
        return Err(Error::param("test set is empty"));
    }
    let truth = labels_for(m, test)?;
    let out = forward(m, test)?;
    report_from_probabilities(&out.probabilities, &truth, &m.classes, out.seconds_per_image)
}

/// Stratified split into (train, validation, test) by the given fractions,
/// grouping items by `key`.
pub fn stratified_split<T, K: Ord>(
    items: Vec<T>,
    key: impl Fn(&T) -> K,
    fractions: [f64; 3],
    seed: u64,
) -> Result<(Vec<T>, Vec<T>, Vec<T>)> {
    if fractions.iter().any(|&f| !(f >= 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::param("split fractions must be non-negative and sum to 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut groups: std::collections::BTreeMap<K, Vec<T>> = std::collections::BTreeMap::new();
    for item in items {
        groups.entry(key(&item)).or_default().push(item);
    }
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for (_, mut group) in groups {
        group.shuffle(&mut rng);
        let n = group.len();
        let n_train = (n as f64 * fractions[0]).round() as usize;
        let n_val = ((n as f64 * fractions[1]).round() as usize).min(n - n_train);
        let mut rest = group.split_off(n_train);
        let tail = rest.split_off(n_val);
        train.extend(group);
        val.extend(rest);
        test.extend(tail);
    }
    Ok((train, val, test))
}

pub fn split_images(
    images: Vec<SpectroImage>,
    fractions: [f64; 3],
    seed: u64,
) -> Result<(Vec<SpectroImage>, Vec<SpectroImage>, Vec<SpectroImage>)> {
    stratified_split(images, |img| img.label, fractions, seed)
}

/// How classifier windows are drawn from a labeled record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowSelection {
    /// Every window from `segment_windows`, majority-labeled.
    All,
    /// One window per record centered on its arrhythmic run (or mid-record
    /// when there is none), majority-labeled.
    EpisodeCentered,
}

fn centered_window(w: &WaveformRecord, cfg: &SpectroConfig) -> Result<Window> {
    let len = (cfg.window_s * w.fs).round() as usize;
    if len == 0 || len > w.len() {
        return Err(Error::param("window longer than record"));
    }
    let first = w.sample_labels.iter().position(|l| l.is_arrhythmic());
    let center = match first {
        Some(start) => {
            let class = w.sample_labels[start];
            let end = w.sample_labels[start..]
                .iter()
                .position(|&l| l != class)
                .map_or(w.len(), |e| start + e);
            (start + end) / 2
        }
        None => w.len() / 2,
    };
    let origin = center.saturating_sub(len / 2).min(w.len() - len);
    let samples = w.samples[origin..origin + len].to_vec();
    let label = crate::spectro::majority_label(&w.sample_labels[origin..origin + len]);
    Ok(Window { origin, fs: w.fs, channel: w.channel, samples, label })
}

/// Labeled spectrogram images for a set of records sharing one channel and rate.
pub fn build_images(
    records: &[WaveformRecord],
    cfg: &SpectroConfig,
    selection: WindowSelection,
) -> Result<Vec<SpectroImage>> {
    let Some(first) = records.first() else {
        return Ok(Vec::new());
    };
    let sg = Spectrogrammer::new(cfg, first.channel, first.fs)?;
    let mut images = Vec::new();
    for rec in records {
        if rec.fs != first.fs || rec.channel != first.channel {
            return Err(Error::param("records differ in channel or sampling rate"));
        }
        let windows = match selection {
            WindowSelection::All => segment_windows(rec, cfg.window_s, cfg.stride_s)?,
            WindowSelection::EpisodeCentered => vec![centered_window(rec, cfg)?],
        };
        for w in &windows {
            images.push(sg.window_image(w)?);
        }
    }
    Ok(images)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorDump {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    classes: Vec<RhythmClass>,
    input_size: usize,
    seed: u64,
    tensors: Vec<TensorDump>,
    /// Fixed input offset; empty when the model was never trained.
    #[serde(default)]
    input_mean: Vec<f64>,
}

const CHECKPOINT_FORMAT: &str = "cardioloop-cnn";
const CHECKPOINT_VERSION: u32 = 1;

fn tensor_shapes(n_classes: usize, input_size: usize) -> [(&'static str, Vec<usize>); 6] {
    let s = input_size / 4;
    [
        ("conv1_w", vec![CONV1_FILTERS, 1, 3, 3]),
        ("conv1_b", vec![CONV1_FILTERS]),
        ("conv2_w", vec![CONV2_FILTERS, CONV1_FILTERS, 3, 3]),
        ("conv2_b", vec![CONV2_FILTERS]),
        ("dense_w", vec![n_classes, CONV2_FILTERS * s * s]),
        ("dense_b", vec![n_classes]),
    ]
}

pub fn checkpoint_json(m: &Model) -> Result<String> {
    let shapes = tensor_shapes(m.n_classes(), m.input_size);
    let tensors = m
        .params
        .tensors()
        .iter()
        .zip(shapes)
        .map(|((name, data), (_, shape))| TensorDump { name: name.to_string(), shape, data: data.to_vec() })
        .collect();
    let ck = Checkpoint {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        classes: m.classes.clone(),
        input_size: m.input_size,
        seed: m.seed,
        tensors,
        input_mean: m.input_mean.clone(),
    };
    Ok(serde_json::to_string(&ck)?)
}

pub fn model_from_checkpoint_json(text: &str) -> Result<Model> {
    let ck: Checkpoint = serde_json::from_str(text)?;
    if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint {} v{}", ck.format, ck.version)));
    }
    let mut m = Model::zeros(ck.classes.clone(), ck.input_size);
    m.seed = ck.seed;
    let expected = tensor_shapes(ck.classes.len(), ck.input_size);
    if ck.tensors.len() != expected.len() {
        return Err(Error::Checkpoint("wrong tensor count".into()));
    }
    let mut params: Params = m.params.clone();
    for ((dump, (name, shape)), slot) in ck.tensors.into_iter().zip(expected).zip(params.tensors_mut()) {
        if dump.name != name || dump.shape != shape || dump.data.len() != shape.iter().product::<usize>() {
            return Err(Error::Checkpoint(format!(
                "tensor `{}` {:?} does not match expected `{name}` {:?}",
                dump.name, dump.shape, shape
            )));
        }
        *slot = dump.data;
    }
    m.params = params;
    m.input_mean = ck.input_mean;
    m.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok(m)
}

pub fn save_checkpoint(m: &Model, path: &Path) -> Result<()> {
    fs::write(path, checkpoint_json(m)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    model_from_checkpoint_json(&fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::model::init_model;

    /// Two classes separable by which half of the image is bright.
    fn toy_set(n: usize) -> Vec<SpectroImage> {
        (0..n)
            .map(|i| {
                let upper = i % 2 == 0;
                let jitter = (i as f64 * 0.618).fract() * 0.2;
                let pixels = (0..64 * 64)
                    .map(|k| {
                        let top = k / 64 < 32;
                        if top == upper { 0.8 + jitter } else { 0.1 + jitter / 2.0 }
                    })
                    .collect();
                SpectroImage {
                    height: 64,
                    width: 64,
                    pixels,
                    label: Some(if upper { RhythmClass::Nsr } else { RhythmClass::AFib }),
                }
            })
            .collect()
    }

    #[test]
    fn loss_decreases_on_separable_toy_set() {
        let data = toy_set(24);
        let m = init_model(2, 1).unwrap();
        let cfg = TrainConfig { epochs: 6, batch_size: 8, learning_rate: 0.02, ..TrainConfig::default() };
        let (trained, hist) = train(&m, &data, &cfg).unwrap();
        for pair in hist.windows(2) {
            assert!(pair[1].loss <= pair[0].loss * 1.05, "{hist:?}");
        }
        assert_eq!(hist.last().unwrap().accuracy, 1.0);
        let (again, _) = train(&m, &data, &cfg).unwrap();
        assert_eq!(trained, again);
        assert_eq!(trained.input_mean.len(), 64 * 64);
        let restored = model_from_checkpoint_json(&checkpoint_json(&trained).unwrap()).unwrap();
        assert_eq!(restored, trained);
    }

    #[test]
    fn zero_epochs_and_single_class() {
        let data = toy_set(6);
        let m = init_model(2, 1).unwrap();
        let cfg = TrainConfig { epochs: 0, ..TrainConfig::default() };
        let (same, hist) = train(&m, &data, &cfg).unwrap();
        assert_eq!(same, m);
        assert!(hist.is_empty());
        let one: Vec<_> = data.into_iter().filter(|i| i.label == Some(RhythmClass::Nsr)).collect();
        assert!(matches!(train(&m, &one, &TrainConfig::default()), Err(Error::Parameter(_))));
    }

    #[test]
    fn checkpoint_round_trip_and_shape_check() {
        let m = init_model(4, 12).unwrap();
        let text = checkpoint_json(&m).unwrap();
        assert_eq!(model_from_checkpoint_json(&text).unwrap(), m);
        let broken = text.replacen("\"shape\":[8,1,3,3]", "\"shape\":[8,1,5,5]", 1);
        assert!(matches!(model_from_checkpoint_json(&broken), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn stratified_split_keeps_everything() {
        let data = toy_set(40);
        let (a, b, c) = split_images(data, [0.5, 0.25, 0.25], 3).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (20, 10, 10));
        let nsr = |v: &Vec<SpectroImage>| v.iter().filter(|i| i.label == Some(RhythmClass::Nsr)).count();
        assert_eq!(nsr(&c), 5);
    }
}
