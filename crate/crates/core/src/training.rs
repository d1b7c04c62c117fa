//! Desk-scale surrogate-gradient training: synthetic data, AdamW with cosine
//! decay, per-epoch logging and evaluation with an audit.

use crate::audit::{AuditReport, Probe};
use crate::error::{Error, Result};
use crate::model::{parse_usize, save, Model};
use crate::neuron::{SpikeFn, SurrogateKind, SurrogateSpec};
use crate::nn::RunOptions;
use crate::params::{ParamKind, ParamStore, Parameter};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

pub const ADAM_BETAS: (f64, f64) = (0.9, 0.999);
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Floor of the cosine decay.
    pub lr_min: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub surrogate: SurrogateSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 12,
            batch_size: 10,
            lr: 2e-3,
            lr_min: 1e-5,
            weight_decay: 0.01,
            seed: 0,
            surrogate: SurrogateSpec::default(),
        }
    }
}

fn parse_f64(key: &str, value: &str) -> Result<f64> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: expected a number, got {value:?}")))
}

impl TrainConfig {
    /// A learning rate of 0 is accepted as a no-op run.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("train.epochs must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("train.batch_size must be positive".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("train.lr must be finite and >= 0, got {}", self.lr));
        }
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr) {
            return bad(format!("train.lr_min must lie in [0, lr], got {}", self.lr_min));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("train.weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if !(self.surrogate.width > 0.0 && self.surrogate.width.is_finite()) {
            return bad(format!("train.surrogate_width must be positive, got {}", self.surrogate.width));
        }
        Ok(())
    }

    /// Applies one `train.*` key. Returns `Ok(false)` for keys outside this namespace.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "train.epochs" => self.epochs = parse_usize(key, value)?,
            "train.batch_size" => self.batch_size = parse_usize(key, value)?,
            "train.lr" => self.lr = parse_f64(key, value)?,
            "train.lr_min" => self.lr_min = parse_f64(key, value)?,
            "train.weight_decay" => self.weight_decay = parse_f64(key, value)?,
            "train.seed" => self.seed = parse_usize(key, value)? as u64,
            "train.surrogate" => {
                self.surrogate.kind = match value {
                    "triangular" => SurrogateKind::Triangular,
                    "sigmoid" => SurrogateKind::SigmoidDerivative,
                    _ => return Err(Error::Config(format!("{key}: expected triangular or sigmoid, got {value:?}"))),
                }
            }
            "train.surrogate_width" => self.surrogate.width = parse_f64(key, value)?,
            k if k.starts_with("train.") => return Err(Error::Config(format!("unknown key {k:?}"))),
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_text(&self) -> String {
        let kind = match self.surrogate.kind {
            SurrogateKind::Triangular => "triangular",
            SurrogateKind::SigmoidDerivative => "sigmoid",
        };
        format!(
            "train.epochs = {}\ntrain.batch_size = {}\ntrain.lr = {}\ntrain.lr_min = {}\n\
             train.weight_decay = {}\ntrain.seed = {}\ntrain.surrogate = {kind}\ntrain.surrogate_width = {}\n",
            self.epochs, self.batch_size, self.lr, self.lr_min, self.weight_decay, self.seed, self.surrogate.width
        )
    }
}

/// Cosine decay from `lr` at step 0 to `lr_min` at `total`.
pub fn cosine_lr(step: usize, total: usize, lr: f64, lr_min: f64) -> f64 {
    if total == 0 {
        return lr;
    }
    let t = step.min(total) as f64 / total as f64;
    lr_min + 0.5 * (lr - lr_min) * (1.0 + (PI * t).cos())
}

/// AdamW with decoupled weight decay on conv/linear weights only.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        AdamW {
            weight_decay,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn decays(p: &Parameter) -> bool {
        p.kind == ParamKind::Weight
    }

    /// Names of decayed and non-decayed parameters.
    pub fn partition(store: &ParamStore) -> (Vec<String>, Vec<String>) {
        let (mut yes, mut no) = (Vec::new(), Vec::new());
        for (_, p) in store.iter().filter(|(_, p)| p.requires_grad) {
            if Self::decays(p) {
                yes.push(p.name.clone());
            } else {
                no.push(p.name.clone());
            }
        }
        (yes, no)
    }

    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        self.t += 1;
        let (b1, b2) = ADAM_BETAS;
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for (i, p) in store.iter_mut().enumerate() {
            let Some(g) = p.grad.as_ref() else { continue };
            if !p.requires_grad {
                continue;
            }
            let decay = if Self::decays(p) { 1.0 - lr * self.weight_decay } else { 1.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let g = g.data();
            for (j, w) in p.value.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                *w = *w * decay - lr * (m[j] / c1) / ((v[j] / c2).sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Generator for class-conditional grating images.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub size: usize,
    pub channels: usize,
    pub train: usize,
    pub test: usize,
    /// Standard deviation of per-pixel Gaussian noise (prototypes have unit RMS).
    pub noise: f64,
    /// Maximum circular shift in pixels along each axis.
    pub jitter: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 10,
            size: 32,
            channels: 3,
            train: 300,
            test: 100,
            noise: 1.0,
            jitter: 2,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    /// Parses `key=value` pairs separated by commas, e.g. `classes=10,noise=0.1`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut s = SyntheticSpec::default();
        for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("synthetic spec: expected key=value, got {part:?}")))?;
            let key = format!("synthetic.{}", k.trim());
            let v = v.trim();
            match k.trim() {
                "classes" => s.classes = parse_usize(&key, v)?,
                "size" => s.size = parse_usize(&key, v)?,
                "channels" => s.channels = parse_usize(&key, v)?,
                "train" => s.train = parse_usize(&key, v)?,
                "test" => s.test = parse_usize(&key, v)?,
                "noise" => s.noise = parse_f64(&key, v)?,
                "jitter" => s.jitter = parse_usize(&key, v)?,
                "seed" => s.seed = parse_usize(&key, v)? as u64,
                _ => return Err(Error::Config(format!("unknown key {key:?}"))),
            }
        }
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 {
            return Err(Error::Config("synthetic.classes must be positive".into()));
        }
        if self.size == 0 || self.channels == 0 || self.train == 0 {
            return Err(Error::Config("synthetic size, channels and train count must be positive".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("synthetic.noise must be >= 0, got {}", self.noise)));
        }
        Ok(())
    }

    /// One prototype per class: per channel, a sum of two oriented sinusoidal
    /// gratings scaled to unit RMS.
    fn prototypes(&self, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        let n = self.size;
        (0..self.classes)
            .map(|_| {
                let mut img = vec![0.0; self.channels * n * n];
                for ch in 0..self.channels {
                    let waves: Vec<(f64, f64, f64)> = (0..2)
                        .map(|_| {
                            let theta = rng.random_range(0.0..PI);
                            let freq = rng.random_range(1.0..4.0) * 2.0 * PI / n as f64;
                            (freq * theta.cos(), freq * theta.sin(), rng.random_range(0.0..2.0 * PI))
                        })
                        .collect();
                    let plane = &mut img[ch * n * n..][..n * n];
                    for (idx, v) in plane.iter_mut().enumerate() {
                        let (y, x) = ((idx / n) as f64, (idx % n) as f64);
                        *v = waves.iter().map(|&(kx, ky, ph)| (kx * x + ky * y + ph).sin()).sum();
                    }
                    let rms = (plane.iter().map(|v| v * v).sum::<f64>() / (n * n) as f64).sqrt();
                    plane.iter_mut().for_each(|v| *v /= rms.max(1e-12));
                }
                img
            })
            .collect()
    }

    fn sample(&self, proto: &[f64], rng: &mut ChaCha8Rng) -> Vec<f32> {
        let n = self.size as isize;
        let j = self.jitter as isize;
        let (dy, dx) = if j > 0 {
            (rng.random_range(-(j as i64)..=j as i64) as isize, rng.random_range(-(j as i64)..=j as i64) as isize)
        } else {
            (0, 0)
        };
        let mut out = Vec::with_capacity(proto.len());
        for ch in 0..self.channels as isize {
            for y in 0..n {
                for x in 0..n {
                    let (sy, sx) = ((y - dy).rem_euclid(n), (x - dx).rem_euclid(n));
                    let clean = proto[((ch * n + sy) * n + sx) as usize];
                    let noise: f64 = StandardNormal.sample(rng);
                    out.push((clean + self.noise * noise) as f32);
                }
            }
        }
        out
    }

    /// Balanced raw splits; deterministic in `seed`.
    pub fn generate(&self) -> Result<RawDataset> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let protos = self.prototypes(&mut rng);
        let split = |count: usize, rng: &mut ChaCha8Rng| {
            let mut values = Vec::with_capacity(count * self.channels * self.size * self.size);
            let mut labels = Vec::with_capacity(count);
            for i in 0..count {
                let c = i % self.classes;
                values.extend(self.sample(&protos[c], rng));
                labels.push(c);
            }
            (values, labels)
        };
        let (train_x, train_y) = split(self.train, &mut rng);
        let (test_x, test_y) = split(self.test, &mut rng);
        Ok(RawDataset {
            shape: [self.channels, self.size, self.size],
            classes: self.classes,
            train: (train_x, train_y),
            test: (test_x, test_y),
        })
    }
}

pub const DATASET_MAGIC: &[u8; 4] = b"SRDS";
pub const DATASET_VERSION: u32 = 1;

/// Unnormalized `f32` images and labels for both splits.
#[derive(Clone, Debug, PartialEq)]
pub struct RawDataset {
    pub shape: [usize; 3],
    pub classes: usize,
    pub train: (Vec<f32>, Vec<usize>),
    pub test: (Vec<f32>, Vec<usize>),
}

impl RawDataset {
    /// Layout (little-endian): magic `SRDS`, `u32` version, `u32` train count,
    /// `u32` test count, `u32` channels, height, width, `u32` class count,
    /// `f32` train then test images, `u32` train then test labels.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(DATASET_MAGIC);
        let header = [
            DATASET_VERSION,
            self.train.1.len() as u32,
            self.test.1.len() as u32,
            self.shape[0] as u32,
            self.shape[1] as u32,
            self.shape[2] as u32,
            self.classes as u32,
        ];
        for h in header {
            out.extend_from_slice(&h.to_le_bytes());
        }
        for v in self.train.0.iter().chain(&self.test.0) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &l in self.train.1.iter().chain(&self.test.1) {
            out.extend_from_slice(&(l as u32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 32 || &bytes[..4] != DATASET_MAGIC {
            return Err(Error::Format("not a dataset file (bad magic bytes)".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
        if word(0) as u32 != DATASET_VERSION {
            return Err(Error::Version {
                found: word(0) as u32,
                expected: DATASET_VERSION,
                detail: String::new(),
            });
        }
        let (ntrain, ntest) = (word(1), word(2));
        let shape = [word(3), word(4), word(5)];
        let classes = word(6);
        let per = shape.iter().product::<usize>();
        let n = ntrain + ntest;
        let body = &bytes[32..];
        if body.len() != 4 * n * per + 4 * n {
            return Err(Error::Format(format!(
                "dataset body is {} bytes, header implies {}",
                body.len(),
                4 * n * per + 4 * n
            )));
        }
        let (img, lab) = body.split_at(4 * n * per);
        let values: Vec<f32> = img
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let labels: Vec<usize> = lab
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
            .collect();
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Format(format!("label {bad} outside [0, {classes})")));
        }
        let (tv, sv) = values.split_at(ntrain * per);
        let (tl, sl) = labels.split_at(ntrain);
        Ok(RawDataset {
            shape,
            classes,
            train: (tv.to_vec(), tl.to_vec()),
            test: (sv.to_vec(), sl.to_vec()),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    File(std::path::PathBuf),
}

/// Normalized images `[N, C, H, W]` and labels.
#[derive(Clone, Debug)]
pub struct Split {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let s = self.images.shape();
        let per: usize = s[1..].iter().product();
        let d = self.images.data();
        let mut out = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            out.extend_from_slice(&d[i * per..(i + 1) * per]);
        }
        let shape = [idx.len(), s[1], s[2], s[3]];
        Ok((Tensor::new(&shape, out)?, idx.iter().map(|&i| self.labels[i]).collect()))
    }
}

#[derive(Clone, Debug)]
pub struct DatasetHandle {
    pub source: DataSource,
    pub classes: usize,
    pub train: Split,
    pub test: Split,
    /// Per-channel mean and standard deviation of the raw training images.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl DatasetHandle {
    /// `synthetic:SPEC` or a dataset file path.
    pub fn open(arg: &str) -> Result<Self> {
        match arg.strip_prefix("synthetic:") {
            Some(spec) => generate_synthetic(&SyntheticSpec::parse(spec)?),
            None if arg == "synthetic" => generate_synthetic(&SyntheticSpec::default()),
            None => {
                let path = std::path::PathBuf::from(arg);
                let raw = RawDataset::from_bytes(&std::fs::read(&path)?)?;
                Self::from_raw(raw, DataSource::File(path))
            }
        }
    }

    pub fn from_raw(raw: RawDataset, source: DataSource) -> Result<Self> {
        let [c, h, w] = raw.shape;
        let plane = h * w;
        let ntrain = raw.train.1.len();
        if ntrain == 0 {
            return Err(Error::EmptyInput("training split"));
        }
        let mut mean = vec![0.0; c];
        let mut std = vec![0.0; c];
        for ch in 0..c {
            let train = &raw.train.0;
            let vals = || (0..ntrain).flat_map(|n| train[(n * c + ch) * plane..][..plane].iter().map(|&v| v as f64));
            let count = (ntrain * plane) as f64;
            mean[ch] = vals().sum::<f64>() / count;
            let var = vals().map(|v| (v - mean[ch]).powi(2)).sum::<f64>() / count;
            std[ch] = var.sqrt().max(1e-8);
        }
        let norm = |(values, labels): (Vec<f32>, Vec<usize>)| -> Result<Split> {
            let n = labels.len();
            let data = values
                .iter()
                .enumerate()
                .map(|(i, &v)| {
                    let ch = (i / plane) % c;
                    (v as f64 - mean[ch]) / std[ch]
                })
                .collect();
            Ok(Split {
                images: Tensor::new(&[n, c, h, w], data)?,
                labels,
            })
        };
        let classes = raw.classes;
        Ok(DatasetHandle {
            source,
            classes,
            train: norm(raw.train)?,
            test: norm(raw.test)?,
            mean,
            std,
        })
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<DatasetHandle> {
    DatasetHandle::from_raw(spec.generate()?, DataSource::Synthetic(spec.clone()))
}

/// Nearest-class-mean classifier fit on `train`, scored on `test`.
pub fn linear_probe_accuracy(train: &Split, test: &Split, classes: usize) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::EmptyInput("probe test split"));
    }
    let per: usize = train.images.shape()[1..].iter().product();
    let mut means = vec![vec![0.0; per]; classes];
    let mut counts = vec![0usize; classes];
    for (n, &l) in train.labels.iter().enumerate() {
        counts[l] += 1;
        for (m, v) in means[l].iter_mut().zip(&train.images.data()[n * per..][..per]) {
            *m += v;
        }
    }
    for (m, &c) in means.iter_mut().zip(&counts) {
        m.iter_mut().for_each(|v| *v /= c.max(1) as f64);
    }
    let correct = test
        .labels
        .iter()
        .enumerate()
        .filter(|&(n, &l)| {
            let x = &test.images.data()[n * per..][..per];
            let score = |m: &Vec<f64>| x.iter().zip(m).map(|(a, b)| a * b).sum::<f64>() - 0.5 * m.iter().map(|v| v * v).sum::<f64>();
            let best = (0..classes)
                .max_by(|&a, &b| score(&means[a]).total_cmp(&score(&means[b])).then(b.cmp(&a)))
                .expect("classes > 0");
            best == l
        })
        .count();
    Ok(correct as f64 / test.len() as f64)
}

fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    pub audit: AuditReport,
}

/// Eval-mode accuracy over `split` with a full SOP audit; EMA rates and BN
/// statistics are read but never changed.
pub fn evaluate(model: &Model, split: &Split, batch_size: usize) -> Result<Evaluation> {
    if split.is_empty() {
        return Err(Error::EmptyInput("evaluation split"));
    }
    let mut probe = Probe::new(false);
    let mut correct = 0;
    let idx: Vec<usize> = (0..split.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, y) = split.batch(chunk)?;
        let out = model.forward(&x, RunOptions::eval(), Some(&mut probe))?;
        correct += argmax_rows(out.logits.value()).iter().zip(&y).filter(|(a, b)| a == b).count();
    }
    Ok(Evaluation {
        accuracy: correct as f64 / split.len() as f64,
        correct,
        total: split.len(),
        audit: probe.report()?,
    })
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub lr: f64,
    pub loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    /// Mean attention-input firing-rate EMA per stage.
    pub firing_rates: BTreeMap<String, f64>,
    /// Per-image SOPs on the held-out split, in G.
    pub sops_g: f64,
    pub ema_in_range: bool,
    pub non_binary_spikes: u64,
}

fn stage_rates(model: &Model) -> BTreeMap<String, f64> {
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for (name, e) in model.ema_names.iter().zip(&model.ema) {
        if let (Some(stage), Some(v)) = (name.strip_suffix(".f_x").and_then(|n| n.split('.').next()), e.value()) {
            let slot = acc.entry(stage.to_string()).or_default();
            slot.0 += v;
            slot.1 += 1;
        }
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

/// Trains `model` in place, calling `log` after each epoch. On a nonfinite
/// loss the model is restored to the end of the last completed epoch, written
/// to `checkpoint` if given, and a divergence error is returned.
pub fn train(
    model: &mut Model,
    data: &DatasetHandle,
    cfg: &TrainConfig,
    checkpoint: Option<&Path>,
    mut log: impl FnMut(&EpochRecord) -> Result<()>,
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    if data.classes != model.config.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, model has {}",
            data.classes, model.config.num_classes
        )));
    }
    if data.train.is_empty() {
        return Err(Error::EmptyInput("training split"));
    }
    let steps_per_epoch = data.train.len().div_ceil(cfg.batch_size);
    let total = steps_per_epoch * cfg.epochs;
    let mut opt = AdamW::new(&model.params, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let opts = RunOptions::train(SpikeFn::Heaviside(cfg.surrogate));
    let mut step = 0;
    let mut records = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let snapshot = model.clone();
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct, mut lr, mut non_binary) = (0.0, 0usize, cfg.lr, 0u64);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (x, y) = data.train.batch(chunk)?;
            let out = model.forward(&x, opts, None)?;
            let loss = out.logits.cross_entropy(&y)?;
            let value = loss.value().item();
            if !value.is_finite() {
                *model = snapshot;
                if let Some(path) = checkpoint {
                    save(model, path)?;
                }
                return Err(Error::Divergence {
                    epoch,
                    step: b,
                    loss: value,
                });
            }
            non_binary += out.non_binary;
            correct += argmax_rows(out.logits.value()).iter().zip(&y).filter(|(a, b)| a == b).count();
            loss_sum += value * chunk.len() as f64;
            model.params.zero_grad();
            model.params.backward(&loss)?;
            drop(loss);
            lr = cosine_lr(step, total, cfg.lr, cfg.lr_min);
            opt.step(&mut model.params, lr);
            model.apply(&out.updates)?;
            step += 1;
        }
        let held_out = if data.test.is_empty() {
            None
        } else {
            Some(evaluate(model, &data.test, cfg.batch_size)?)
        };
        let rec = EpochRecord {
            epoch,
            steps: step,
            lr,
            loss: loss_sum / data.train.len() as f64,
            train_accuracy: correct as f64 / data.train.len() as f64,
            test_accuracy: held_out.as_ref().map_or(f64::NAN, |e| e.accuracy),
            firing_rates: stage_rates(model),
            sops_g: held_out.as_ref().map_or(0.0, |e| e.audit.total_sops_g),
            ema_in_range: model.ema.iter().all(|e| e.value().is_none_or(|v| (0.0..=1.0).contains(&v))),
            non_binary_spikes: non_binary + held_out.as_ref().map_or(0, |e| e.audit.non_binary),
        };
        log(&rec)?;
        records.push(rec);
    }
    if let Some(path) = checkpoint {
        save(model, path)?;
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny_spec() -> SyntheticSpec {
        SyntheticSpec {
            classes: 4,
            size: 8,
            train: 16,
            test: 8,
            ..SyntheticSpec::default()
        }
    }

    fn tiny_model(classes: usize) -> Model {
        let mut c = ModelConfig::registry("Nano").unwrap();
        c.input_height = 8;
        c.input_width = 8;
        c.num_classes = classes;
        c.time_steps = 2;
        Model::build(&c, 3).unwrap()
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 100, 1e-3, 1e-5), 1e-3);
        assert!((cosine_lr(100, 100, 1e-3, 1e-5) - 1e-5).abs() < 1e-18);
        assert!((cosine_lr(50, 100, 1e-3, 1e-5) - (1e-3 + 1e-5) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn adamw_first_step_is_lr_sized() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::full(&[2], 1.0), ParamKind::Weight).unwrap();
        let b = store.add("b", Tensor::full(&[1], 1.0), ParamKind::Bias).unwrap();
        store.get_mut(id).grad = Some(Tensor::new(&[2], vec![3.0, -0.5]).unwrap());
        store.get_mut(b).grad = Some(Tensor::full(&[1], 2.0));
        let mut opt = AdamW::new(&store, 0.1);
        opt.step(&mut store, 0.01);
        // Bias-corrected first step moves by lr·sign(g); decay scales weights by 1 − lr·wd.
        let w = store.value(id).data();
        assert!((w[0] - (0.999 - 0.01)).abs() < 1e-9);
        assert!((w[1] - (0.999 + 0.01)).abs() < 1e-9);
        assert!((store.value(b).data()[0] - 0.99).abs() < 1e-9);
    }

    #[test]
    fn weight_decay_partition_excludes_norm_and_bias() {
        let m = tiny_model(4);
        let (yes, no) = AdamW::partition(&m.params);
        assert!(yes.iter().all(|n| n.ends_with("conv.weight") || n == "classifier.weight"));
        assert!(no.iter().all(|n| n.contains(".bn.") || n == "classifier.bias"));
        assert_eq!(yes.len() + no.len(), m.params.len());
    }

    #[test]
    fn synthetic_is_deterministic_and_balanced() {
        let a = tiny_spec().generate().unwrap();
        let b = tiny_spec().generate().unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_eq!(a.train.1, (0..16).map(|i| i % 4).collect::<Vec<_>>());
        let other = SyntheticSpec { seed: 8, ..tiny_spec() }.generate().unwrap();
        assert_ne!(a.to_bytes(), other.to_bytes());
    }

    #[test]
    fn noise_free_classes_are_identical_and_probe_separable() {
        let spec = SyntheticSpec {
            noise: 0.0,
            jitter: 0,
            ..tiny_spec()
        };
        let raw = spec.generate().unwrap();
        let per = 3 * 8 * 8;
        assert_eq!(&raw.train.0[..per], &raw.train.0[4 * per..5 * per]);
        let d = generate_synthetic(&spec).unwrap();
        assert!(linear_probe_accuracy(&d.train, &d.test, 4).unwrap() > 0.99);
    }

    #[test]
    fn zero_classes_rejected() {
        let spec = SyntheticSpec { classes: 0, ..tiny_spec() };
        assert!(matches!(generate_synthetic(&spec), Err(Error::Config(_))));
        assert!(SyntheticSpec::parse("classes=3,bogus=1").is_err());
        assert_eq!(SyntheticSpec::parse("classes=3, noise=0.5").unwrap().noise, 0.5);
    }

    #[test]
    fn dataset_file_round_trip() {
        let raw = tiny_spec().generate().unwrap();
        let bytes = raw.to_bytes();
        assert_eq!(RawDataset::from_bytes(&bytes).unwrap(), raw);
        let mut bad = bytes.clone();
        let last = bad.len() - 4;
        bad[last..].copy_from_slice(&99u32.to_le_bytes());
        assert!(matches!(RawDataset::from_bytes(&bad), Err(Error::Format(_))));
        assert!(RawDataset::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn normalization_uses_train_statistics() {
        let d = generate_synthetic(&tiny_spec()).unwrap();
        let plane = 64;
        for ch in 0..3 {
            let vals: Vec<f64> = (0..16).flat_map(|n| d.train.images.data()[(n * 3 + ch) * plane..][..plane].to_vec()).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-9);
        }
    }

    #[test]
    fn config_keys() {
        let mut c = TrainConfig::default();
        assert!(c.set("train.lr", "0.5").unwrap());
        assert!(!c.set("time_steps", "4").unwrap());
        assert!(c.set("train.nope", "1").is_err());
        c.set("train.surrogate", "sigmoid").unwrap();
        let mut d = TrainConfig::default();
        for (_, k, v) in crate::model::parse_kv(&c.to_text()).unwrap() {
            d.set(&k, &v).unwrap();
        }
        assert_eq!(c, d);
        c.weight_decay = -1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let d = generate_synthetic(&SyntheticSpec { test: 0, ..tiny_spec() }).unwrap();
        let mut m = tiny_model(4);
        let before: Vec<Tensor> = m.params.iter().map(|(_, p)| p.value.clone()).collect();
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 16,
            lr: 0.0,
            lr_min: 0.0,
            ..TrainConfig::default()
        };
        let recs = train(&mut m, &d, &cfg, None, |_| Ok(())).unwrap();
        let after: Vec<Tensor> = m.params.iter().map(|(_, p)| p.value.clone()).collect();
        assert_eq!(before, after);
        // One full batch per epoch: batch statistics and rates repeat exactly.
        for r in &recs[1..] {
            assert!((r.loss - recs[0].loss).abs() < 1e-12, "{} vs {}", r.loss, recs[0].loss);
        }
    }

    #[test]
    fn same_seed_same_log() {
        let d = generate_synthetic(&tiny_spec()).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let run = || {
            let mut m = tiny_model(4);
            train(&mut m, &d, &cfg, None, |_| Ok(())).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        assert!(a[0].ema_in_range);
        assert_eq!(a[0].non_binary_spikes, 0);
    }

    #[test]
    fn divergence_restores_last_good_state() {
        let d = generate_synthetic(&tiny_spec()).unwrap();
        let mut m = tiny_model(4);
        let id = m.params.id("classifier.bias").unwrap();
        m.params.get_mut(id).value.data_mut()[0] = f64::INFINITY;
        let before = crate::model::checkpoint_bytes(&m);
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("last.ckpt");
        let err = train(&mut m, &d, &cfg, Some(&path), |_| Ok(())).unwrap_err();
        assert!(matches!(err, Error::Divergence { epoch: 1, step: 0, .. }));
        assert_eq!(std::fs::read(&path).unwrap(), before);
        assert_eq!(crate::model::checkpoint_bytes(&m), before);
    }

    #[test]
    fn class_count_mismatch_rejected() {
        let d = generate_synthetic(&tiny_spec()).unwrap();
        let mut m = tiny_model(5);
        let r = train(&mut m, &d, &TrainConfig::default(), None, |_| Ok(()));
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn evaluation_is_repeatable() {
        let d = generate_synthetic(&tiny_spec()).unwrap();
        let m = tiny_model(4);
        let a = evaluate(&m, &d.test, 3).unwrap();
        let b = evaluate(&m, &d.test, 3).unwrap();
        assert_eq!(a.audit, b.audit);
        assert_eq!(a.accuracy, b.accuracy);
        assert_eq!(a.total, 8);
    }
}
