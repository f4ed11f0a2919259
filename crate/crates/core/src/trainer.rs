//! Softmax classification head trained by mini-batch gradient descent with
//! momentum, checkpointed every epoch and selected on a labeled dev split.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::distr::{Distribution, Uniform};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, Matrix};
use crate::scalar::Scalar;
use crate::store::{Dataset, Reader};

pub const MODEL_MAGIC: &[u8; 4] = b"XITM";
pub const MODEL_VERSION: u16 = 1;

/// Batch losses above this are treated as divergence, alongside non-finite
/// values. A mean cross-entropy of 1e4 means the true class gets probability
/// around e^-10000.
pub const DIVERGENCE_LOSS: f64 = 1e4;

/// Checkpoint provenance for target-dev selection.
pub const TARGET_DEV: &str = "target-dev";

#[derive(Debug, Clone, PartialEq)]
pub struct HeadModel<T> {
    /// `C × d`
    pub weights: Matrix<T>,
    pub bias: Vec<T>,
    pub seed: u64,
}

impl<T: Scalar> HeadModel<T> {
    pub fn zeros(classes: usize, d: usize) -> Self {
        HeadModel {
            weights: Matrix::zeros(classes, d),
            bias: vec![T::zero(); classes],
            seed: 0,
        }
    }

    /// `W, b ~ U(-1/√d, 1/√d)`
    pub fn init(classes: usize, d: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (d.max(1) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let mut m = Self::zeros(classes, d);
        for c in 0..classes {
            for x in m.weights.row_mut(c) {
                *x = T::of(dist.sample(&mut rng));
            }
        }
        for b in &mut m.bias {
            *b = T::of(dist.sample(&mut rng));
        }
        m.seed = seed;
        m
    }

    pub fn classes(&self) -> usize {
        self.weights.rows()
    }

    pub fn d(&self) -> usize {
        self.weights.cols()
    }

    pub fn logits(&self, x: &[T]) -> Result<Vec<T>> {
        if x.len() != self.d() {
            return Err(Error::dim(self.d(), x.len(), "classifier input"));
        }
        Ok((0..self.classes())
            .map(|c| dot(self.weights.row(c), x) + self.bias[c])
            .collect())
    }

    pub fn is_finite(&self) -> bool {
        self.weights.is_finite() && self.bias.iter().all(|b| b.is_finite())
    }
}

/// Numerically stable softmax.
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Most probable class and the probability vector.
pub fn predict<T: Scalar>(model: &HeadModel<T>, x: &[T]) -> Result<(usize, Vec<T>)> {
    let probs = softmax(&model.logits(x)?);
    let best = argmax(&probs);
    Ok((best, probs))
}

fn argmax<T: Scalar>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub weights: Matrix<T>,
    pub bias: Vec<T>,
}

/// Mean cross-entropy over the batch and its gradient.
pub fn loss_and_grad<T: Scalar>(model: &HeadModel<T>, batch: &[(&[T], u32)]) -> Result<(T, Gradients<T>)> {
    if batch.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let classes = model.classes();
    let mut grad = Gradients {
        weights: Matrix::zeros(classes, model.d()),
        bias: vec![T::zero(); classes],
    };
    let mut loss = T::zero();
    let scale = T::one() / T::of(batch.len() as f64);
    for &(x, label) in batch {
        let label = label as usize;
        if label >= classes {
            return Err(Error::Invalid(format!("label {label} out of range for {classes} classes")));
        }
        let logits = model.logits(x)?;
        let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<T>().ln();
        loss += lse - logits[label];
        for c in 0..classes {
            let p = (logits[c] - lse).exp();
            let coef = (p - if c == label { T::one() } else { T::zero() }) * scale;
            axpy(coef, x, grad.weights.row_mut(c));
            grad.bias[c] += coef;
        }
    }
    Ok((loss * scale, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    /// Stop after this many epochs without dev improvement; 0 disables.
    #[serde(default)]
    pub patience: usize,
    /// Name of the split used for checkpoint selection.
    #[serde(default = "default_selection")]
    pub selection: String,
}

fn default_selection() -> String {
    TARGET_DEV.to_string()
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 64,
            learning_rate: 0.05,
            momentum: 0.9,
            seed: 42,
            patience: 0,
            selection: default_selection(),
        }
    }
}

impl TrainConfig {
    /// Full-scale encoder fine-tuning values, kept for reference runs.
    pub fn reference_scale() -> Self {
        TrainConfig {
            epochs: 15,
            batch_size: 64,
            learning_rate: 5e-6,
            momentum: 0.9,
            seed: 42,
            patience: 0,
            selection: default_selection(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(Error::Invalid("epochs, batch size and learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Invalid("momentum must be in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub epoch: usize,
    pub model: HeadModel<T>,
    pub dev_accuracy: f64,
    /// Which split selected this checkpoint, e.g. `target-dev`.
    pub provenance: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_accuracy: f64,
}

/// Labeled vectors in the working scalar type.
pub fn labeled_vectors<T: Scalar>(ds: &Dataset) -> Result<Vec<(Vec<T>, u32)>> {
    ds.records
        .iter()
        .map(|r| {
            let label = r.label.ok_or_else(|| Error::MissingLabel(r.id.clone()))?;
            Ok((r.vec.iter().map(|&x| T::of_f32(x)).collect(), label))
        })
        .collect()
}

pub fn accuracy_on<T: Scalar>(model: &HeadModel<T>, data: &[(Vec<T>, u32)]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Invalid("accuracy of an empty split".into()));
    }
    let mut correct = 0usize;
    for (x, y) in data {
        if predict(model, x)?.0 == *y as usize {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Trains a fresh head and returns the best dev checkpoint with the
/// per-epoch history. Ties in dev accuracy keep the earliest epoch.
pub fn train<T: Scalar>(
    trainset: &[(Vec<T>, u32)],
    dev: &[(Vec<T>, u32)],
    classes: usize,
    cfg: &TrainConfig,
) -> Result<(Checkpoint<T>, Vec<EpochRecord>)> {
    cfg.validate()?;
    let d = trainset
        .first()
        .map(|(x, _)| x.len())
        .ok_or_else(|| Error::Invalid("empty training set".into()))?;
    if dev.is_empty() {
        return Err(Error::Invalid("empty dev split".into()));
    }
    let mut model = HeadModel::init(classes, d, cfg.seed);
    let mut vel_w = Matrix::<T>::zeros(classes, d);
    let mut vel_b = vec![T::zero(); classes];
    let lr = T::of(cfg.learning_rate);
    let mu = T::of(cfg.momentum);

    // Shuffling uses its own stream so it does not depend on init draws.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5348_5546);
    let mut order: Vec<usize> = (0..trainset.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<Checkpoint<T>> = None;
    let mut since_best = 0usize;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0f64;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(&[T], u32)> = chunk.iter().map(|&i| (trainset[i].0.as_slice(), trainset[i].1)).collect();
            let (loss, grad) = loss_and_grad(&model, &batch)?;
            let loss = loss.as_f64();
            if !loss.is_finite() || loss > DIVERGENCE_LOSS {
                return Err(Error::Diverged { epoch });
            }
            total += loss * chunk.len() as f64;
            for c in 0..classes {
                let (vw, gw) = (vel_w.row_mut(c), grad.weights.row(c));
                for (v, &g) in vw.iter_mut().zip(gw) {
                    *v = mu * *v - lr * g;
                }
                axpy(T::one(), vel_w.row(c), model.weights.row_mut(c));
                vel_b[c] = mu * vel_b[c] - lr * grad.bias[c];
                model.bias[c] += vel_b[c];
            }
        }
        if !model.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        let dev_accuracy = accuracy_on(&model, dev)?;
        history.push(EpochRecord {
            epoch,
            train_loss: total / trainset.len() as f64,
            dev_accuracy,
        });
        if best.as_ref().is_none_or(|b| dev_accuracy > b.dev_accuracy) {
            best = Some(Checkpoint {
                epoch,
                model: model.clone(),
                dev_accuracy,
                provenance: cfg.selection.clone(),
            });
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.patience > 0 && since_best >= cfg.patience {
                break;
            }
        }
    }
    Ok((best.expect("at least one epoch"), history))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelMeta {
    epoch: usize,
    dev_accuracy: f64,
    provenance: String,
    seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    config_digest: Option<String>,
}

/// Binary layout: magic "XITM" | version u16 | classes u32 | d u32 |
/// meta_len u32 | meta JSON | W row-major f64 LE | b f64 LE.
pub fn encode_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>, config_digest: Option<&str>) -> Result<Vec<u8>> {
    let meta = serde_json::to_vec(&ModelMeta {
        epoch: ckpt.epoch,
        dev_accuracy: ckpt.dev_accuracy,
        provenance: ckpt.provenance.clone(),
        seed: ckpt.model.seed,
        config_digest: config_digest.map(str::to_string),
    })?;
    let m = &ckpt.model;
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    out.extend_from_slice(&(m.classes() as u32).to_le_bytes());
    out.extend_from_slice(&(m.d() as u32).to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    for x in m.weights.as_slice().iter().chain(&m.bias) {
        out.extend_from_slice(&x.as_f64().to_le_bytes());
    }
    Ok(out)
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != MODEL_MAGIC {
        return Err(Error::Format("bad model magic".into()));
    }
    let version = r.u16()?;
    if version != MODEL_VERSION {
        return Err(Error::Format(format!("unsupported model version {version}")));
    }
    let classes = r.u32()? as usize;
    let d = r.u32()? as usize;
    let meta_len = r.u32()? as usize;
    let meta: ModelMeta = serde_json::from_slice(r.take(meta_len)?)?;
    let weights = (0..classes * d).map(|_| r.f64().map(T::of)).collect::<Result<Vec<_>>>()?;
    let bias = (0..classes).map(|_| r.f64().map(T::of)).collect::<Result<Vec<_>>>()?;
    r.finish()?;
    Ok(Checkpoint {
        epoch: meta.epoch,
        model: HeadModel {
            weights: Matrix::from_vec(classes, d, weights)?,
            bias,
            seed: meta.seed,
        },
        dev_accuracy: meta.dev_accuracy,
        provenance: meta.provenance,
    })
}

pub fn persist_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>, path: impl AsRef<Path>, config_digest: Option<&str>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&encode_checkpoint(ckpt, config_digest)?)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    decode_checkpoint(&bytes)
}

/// History as CSV: `epoch,train_loss,dev_accuracy`.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,train_loss,dev_accuracy\n");
    for h in history {
        s.push_str(&format!("{},{},{}\n", h.epoch, h.train_loss, h.dev_accuracy));
    }
    s
}
