//! Labeled signal windows: segmentation, stratified splits, the binary
//! dataset file, and a synthetic four-class vibration generator.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, FormatError, Result};
use crate::io::{Reader, Writer};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const DATASET_MAGIC: [u8; 4] = *b"TSVD";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `[L, C]`, channel-minor.
    pub signal: Tensor<f32>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    class_names: Vec<String>,
    signal_len: usize,
    channels: usize,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, class_names: Vec<String>, signal_len: usize, channels: usize) -> Result<Self> {
        if class_names.is_empty() {
            return Err(Error::Data("a dataset needs at least one class".into()));
        }
        for (i, s) in samples.iter().enumerate() {
            if s.signal.shape() != [signal_len, channels] {
                return Err(Error::Data(format!(
                    "sample {i} has shape {:?}, expected [{signal_len}, {channels}]",
                    s.signal.shape()
                )));
            }
            if s.label >= class_names.len() {
                return Err(Error::Data(format!(
                    "sample {i} has label {} but only {} classes",
                    s.label,
                    class_names.len()
                )));
            }
        }
        Ok(Self {
            samples,
            class_names,
            signal_len,
            channels,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn signal_len(&self) -> usize {
        self.signal_len
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    /// Same dataset keeping only the samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            class_names: self.class_names.clone(),
            signal_len: self.signal_len,
            channels: self.channels,
        }
    }

    /// Per-sample, per-channel standardization to zero mean and unit
    /// variance. Constant channels are only centered.
    pub fn standardized(&self) -> Self {
        let mut out = self.clone();
        let c = self.channels;
        for s in &mut out.samples {
            let data = s.signal.data_mut();
            for ch in 0..c {
                let n = (data.len() / c) as f64;
                let mean = data.iter().skip(ch).step_by(c).map(|&v| v as f64).sum::<f64>() / n;
                let var = data
                    .iter()
                    .skip(ch)
                    .step_by(c)
                    .map(|&v| (v as f64 - mean).powi(2))
                    .sum::<f64>()
                    / n;
                let inv = if var > 0.0 { 1.0 / var.sqrt() } else { 1.0 };
                for v in data.iter_mut().skip(ch).step_by(c) {
                    *v = ((*v as f64 - mean) * inv) as f32;
                }
            }
        }
        out
    }
}

/// Cuts a `[T, C]` recording into `floor(T / width)` consecutive,
/// non-overlapping `[width, C]` windows; the tail is dropped.
pub fn sliding_window(signal: &Tensor<f32>, width: usize) -> Result<Vec<Tensor<f32>>> {
    if width == 0 {
        return Err(Error::Config("window width must be >= 1".into()));
    }
    let (len, c) = match *signal.shape() {
        [t] => (t, 1),
        [t, c] => (t, c),
        _ => return Err(Error::dim("sliding_window", signal.shape(), &[0, 0])),
    };
    (0..len / width)
        .map(|w| {
            let chunk = signal.data()[w * width * c..(w + 1) * width * c].to_vec();
            Tensor::new(&[width, c], chunk)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train_fraction: 0.8,
            seed: 0,
        }
    }
}

/// Stratified split: each class is shuffled with the seed and its first
/// `floor(count · train_fraction)` samples go to training.
pub fn split(dataset: &Dataset, spec: SplitSpec) -> Result<(Dataset, Dataset)> {
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train_fraction must lie in (0, 1), got {}",
            spec.train_fraction
        )));
    }
    let mut rng = Rng::new(spec.seed);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in 0..dataset.num_classes() {
        let mut idx: Vec<usize> = (0..dataset.len())
            .filter(|&i| dataset.samples[i].label == class)
            .collect();
        if idx.len() < 2 {
            return Err(Error::Data(format!(
                "class {class} ({}) has {} samples; at least 2 are needed to split",
                dataset.class_names[class],
                idx.len()
            )));
        }
        rng.shuffle(&mut idx);
        let cut = (idx.len() as f64 * spec.train_fraction).floor() as usize;
        train.extend_from_slice(&idx[..cut]);
        test.extend_from_slice(&idx[cut..]);
    }
    Ok((dataset.subset(&train), dataset.subset(&test)))
}

pub fn write_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    encode_dataset(dataset, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

fn encode_dataset(d: &Dataset, w: &mut impl Write) -> std::io::Result<()> {
    let mut out = Writer::new(w);
    out.bytes(&DATASET_MAGIC)?;
    out.u32(DATASET_VERSION)?;
    out.u32(d.len() as u32)?;
    out.u32(d.signal_len as u32)?;
    out.u32(d.channels as u32)?;
    out.u32(d.num_classes() as u32)?;
    for name in &d.class_names {
        out.u16(name.len() as u16)?;
        out.bytes(name.as_bytes())?;
    }
    for s in &d.samples {
        out.u32(s.label as u32)?;
        out.f32s(s.signal.data())?;
    }
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    decode_dataset(&bytes).map_err(|kind| Error::Format {
        path: path.to_path_buf(),
        kind,
    })
}

fn decode_dataset(bytes: &[u8]) -> Result<Dataset, FormatError> {
    let mut r = Reader::new(bytes);
    r.magic(DATASET_MAGIC)?;
    r.version(DATASET_VERSION)?;
    let count = r.u32("sample count")? as usize;
    let len = r.u32("signal length")? as usize;
    let channels = r.u32("channel count")? as usize;
    let classes = r.u32("class count")? as usize;
    if len == 0 || channels == 0 || classes == 0 {
        return Err(FormatError::Shape(format!(
            "header declares L={len}, C={channels}, N_c={classes}"
        )));
    }
    let mut names = Vec::with_capacity(classes);
    for i in 0..classes {
        let n = r.u16("class name length")? as usize;
        let raw = r.take(n, "class name")?;
        let name = String::from_utf8(raw.to_vec())
            .map_err(|_| FormatError::Invalid(format!("class name {i} is not UTF-8")))?;
        names.push(name);
    }
    let mut samples = Vec::with_capacity(count.min(1 << 20));
    for i in 0..count {
        let label = r.u32("sample label")? as usize;
        if label >= classes {
            return Err(FormatError::Invalid(format!(
                "sample {i} has label {label} but only {classes} classes"
            )));
        }
        let values = r.f32s(len * channels, "sample payload")?;
        let signal = Tensor::new(&[len, channels], values).map_err(|e| FormatError::Shape(e.to_string()))?;
        samples.push(Sample { signal, label });
    }
    r.finish()?;
    Dataset::new(samples, names, len, channels).map_err(|e| FormatError::Invalid(e.to_string()))
}

/// Names of the synthetic classes, in label order.
pub const SYNTHETIC_CLASSES: [&str; 4] = ["tone", "third_harmonic", "amplitude_modulated", "second_harmonic"];

/// Nominal sampling rate of the synthetic signals (Hz).
pub const SYNTHETIC_RATE: f64 = 1280.0;
/// Shaft tone of the synthetic signals (Hz).
pub const SYNTHETIC_TONE: f64 = 50.0;
/// Impact rate of the looseness-like class (Hz).
const IMPACT_RATE: f64 = 25.0;
/// Structural resonance the impacts excite (Hz) and its decay time (s).
const RESONANCE: f64 = 320.0;
const RESONANCE_DECAY: f64 = 0.006;
const SNR_DB: f64 = 10.0;

/// Four single-channel vibration classes: a pure tone; tone plus third
/// harmonic; tone plus periodic impacts whose decaying envelope modulates a
/// structural resonance (looseness-like); tone plus a strong second
/// harmonic. Each sample has random phases, ±20% amplitude jitter and white
/// Gaussian noise at 10 dB SNR. Samples are ordered by class.
pub fn gen_synthetic(n_per_class: usize, signal_len: usize, seed: u64) -> Result<Dataset> {
    if signal_len < 64 {
        return Err(Error::Config(format!("synthetic signals need L >= 64, got {signal_len}")));
    }
    let mut rng = Rng::new(seed);
    let w0 = 2.0 * std::f64::consts::PI * SYNTHETIC_TONE / SYNTHETIC_RATE;
    let wr = 2.0 * std::f64::consts::PI * RESONANCE / SYNTHETIC_RATE;
    let impact_period = SYNTHETIC_RATE / IMPACT_RATE;
    let decay = RESONANCE_DECAY * SYNTHETIC_RATE;
    let mut samples = Vec::with_capacity(4 * n_per_class);
    for label in 0..SYNTHETIC_CLASSES.len() {
        for _ in 0..n_per_class {
            let amp = rng.uniform_range(0.8, 1.2);
            let phase = rng.uniform_range(0.0, 2.0 * std::f64::consts::PI);
            let phase2 = rng.uniform_range(0.0, 2.0 * std::f64::consts::PI);
            let offset = rng.uniform_range(0.0, impact_period);
            let clean: Vec<f64> = (0..signal_len)
                .map(|t| {
                    let t = t as f64;
                    let base = (w0 * t + phase).sin();
                    amp * match label {
                        0 => base,
                        1 => base + 0.5 * (3.0 * w0 * t + phase2).sin(),
                        2 => {
                            let envelope = (-((t + offset) % impact_period) / decay).exp();
                            base + envelope * (wr * t + phase2).sin()
                        }
                        _ => base + 0.8 * (2.0 * w0 * t + phase2).sin(),
                    }
                })
                .collect();
            let power = clean.iter().map(|v| v * v).sum::<f64>() / signal_len as f64;
            let noise_std = (power / 10f64.powf(SNR_DB / 10.0)).sqrt();
            let data = clean
                .into_iter()
                .map(|v| (v + noise_std * rng.normal()) as f32)
                .collect();
            samples.push(Sample {
                signal: Tensor::new(&[signal_len, 1], data)?,
                label,
            });
        }
    }
    let names = SYNTHETIC_CLASSES.iter().map(|s| s.to_string()).collect();
    Dataset::new(samples, names, signal_len, 1)
}
