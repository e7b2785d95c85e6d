use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::data::Dataset;
use super::model::{argmax, backward, forward_layers, softmax_rows, ParamGrad};
use super::spec::NetworkSpec;
use super::weights::{LayerParams, WeightStore};
use super::NnError;

const EVAL_CHUNK: usize = 256;
const BETA1: f32 = 0.9;
const BETA2: f32 = 0.999;
const ADAM_EPS: f32 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub epochs: usize,
    pub batch_size: usize,
    /// Fraction of the training split held out for early stopping; 0 disables it.
    pub validation_fraction: f64,
    pub early_stop_patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 10,
            batch_size: 32,
            validation_fraction: 0.0,
            early_stop_patience: 3,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        let bad = |m: &str| Err(NnError::InvalidConfig(m.into()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and non-negative");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad("validation_fraction must lie in [0, 1)");
        }
        if self.early_stop_patience == 0 {
            return bad("early_stop_patience must be at least 1");
        }
        Ok(())
    }
}

/// Stops after `patience` consecutive epochs without a strict improvement of
/// the monitored loss.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    wait: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            wait: 0,
        }
    }

    /// Records one epoch's loss; returns true when training should halt.
    pub fn observe(&mut self, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.wait = 0;
        } else {
            self.wait += 1;
        }
        self.wait >= self.patience
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TrainReport {
    /// Training-split loss of the initial weights (inference mode).
    pub initial_loss: f64,
    /// Mean minibatch loss per completed epoch.
    pub epoch_losses: Vec<f64>,
    pub validation_losses: Vec<f64>,
    /// Epoch (1-based) after which early stopping fired.
    pub stopped_at: Option<usize>,
}

struct Adam {
    m: Vec<ParamGrad>,
    v: Vec<ParamGrad>,
    t: i32,
}

fn zeros_like(weights: &WeightStore) -> Vec<ParamGrad> {
    weights
        .layers
        .iter()
        .map(|l| match l {
            LayerParams::None => ParamGrad::None,
            LayerParams::Linear { weight, bias } => ParamGrad::Linear {
                weight: vec![0.0; weight.len()],
                bias: vec![0.0; bias.len()],
            },
            LayerParams::BatchNorm(bn) => ParamGrad::BatchNorm {
                gamma: vec![0.0; bn.gamma.len()],
                beta: vec![0.0; bn.beta.len()],
            },
        })
        .collect()
}

fn grad_slices(g: &mut ParamGrad) -> Vec<&mut Vec<f32>> {
    match g {
        ParamGrad::None => vec![],
        ParamGrad::Linear { weight, bias } => vec![weight, bias],
        ParamGrad::BatchNorm { gamma, beta } => vec![gamma, beta],
    }
}

fn param_slices(p: &mut LayerParams) -> Vec<&mut [f32]> {
    match p {
        LayerParams::None => vec![],
        LayerParams::Linear { weight, bias } => vec![weight.data_mut(), bias.data_mut()],
        LayerParams::BatchNorm(bn) => vec![bn.gamma.data_mut(), bn.beta.data_mut()],
    }
}

impl Adam {
    fn new(weights: &WeightStore) -> Self {
        Self {
            m: zeros_like(weights),
            v: zeros_like(weights),
            t: 0,
        }
    }

    fn step(&mut self, weights: &mut WeightStore, mut grads: Vec<ParamGrad>, lr: f32) {
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t);
        let c2 = 1.0 - BETA2.powi(self.t);
        for (((p, g), m), v) in weights.layers.iter_mut().zip(grads.iter_mut()).zip(self.m.iter_mut()).zip(self.v.iter_mut()) {
            for (((p, g), m), v) in param_slices(p).into_iter().zip(grad_slices(g)).zip(grad_slices(m)).zip(grad_slices(v)) {
                for i in 0..p.len() {
                    m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
                    v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
                    p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
                }
            }
        }
    }
}

fn gather(data: &Dataset, indices: &[usize]) -> (Vec<f32>, Vec<usize>) {
    let mut images = Vec::with_capacity(indices.len() * data.image(0).len());
    for &i in indices {
        images.extend_from_slice(data.image(i));
    }
    (images, indices.iter().map(|&i| data.labels[i]).collect())
}

fn cross_entropy(probs: &[f32], labels: &[usize], classes: usize) -> f64 {
    labels
        .iter()
        .enumerate()
        .map(|(b, &y)| -(probs[b * classes + y].max(1e-30) as f64).ln())
        .sum()
}

/// Inference-mode logits for `indices`, in chunks.
fn predict(spec: &NetworkSpec, weights: &WeightStore, data: &Dataset, indices: &[usize], mut f: impl FnMut(&[f32], &[usize])) -> Result<(), NnError> {
    let mut w = weights.clone();
    for chunk in indices.chunks(EVAL_CHUNK) {
        let (images, labels) = gather(data, chunk);
        let (out, _) = forward_layers::<ChaCha20Rng>(spec, &mut w, &images, chunk.len(), None)?;
        f(&out, &labels);
    }
    Ok(())
}

fn mean_loss(spec: &NetworkSpec, weights: &WeightStore, data: &Dataset, indices: &[usize]) -> Result<f64, NnError> {
    let classes = spec.class_count()?;
    let mut total = 0.0;
    predict(spec, weights, data, indices, |z, l| {
        let mut p = z.to_vec();
        softmax_rows(&mut p, classes);
        total += cross_entropy(&p, l, classes);
    })?;
    Ok(total / indices.len().max(1) as f64)
}

fn check_data(spec: &NetworkSpec, data: &Dataset) -> Result<(), NnError> {
    if data.is_empty() {
        return Err(NnError::EmptyDataset);
    }
    if data.image_shape() != spec.input_shape {
        return Err(NnError::ShapeMismatch {
            context: "layer 0".into(),
            expected: format!("input {:?}", spec.input_shape),
            found: format!("{:?}", data.image_shape()),
        });
    }
    let classes = spec.class_count()?;
    if data.classes > classes {
        return Err(NnError::ShapeMismatch {
            context: "dataset".into(),
            expected: format!("at most {classes} classes"),
            found: data.classes.to_string(),
        });
    }
    Ok(())
}

pub fn train(spec: &NetworkSpec, data: &Dataset, cfg: &TrainConfig) -> Result<WeightStore, NnError> {
    train_with_report(spec, data, cfg).map(|(w, _)| w)
}

/// Adam on softmax cross-entropy. Everything random (initialization, split,
/// shuffling, dropout) derives from `cfg.seed`.
pub fn train_with_report(spec: &NetworkSpec, data: &Dataset, cfg: &TrainConfig) -> Result<(WeightStore, TrainReport), NnError> {
    spec.validate()?;
    cfg.validate()?;
    check_data(spec, data)?;
    let classes = spec.class_count()?;
    let mut weights = WeightStore::init(spec, cfg.seed)?;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed ^ 0x7261_696e);

    let mut order: Vec<usize> = (0..data.len()).collect();
    let n_val = (data.len() as f64 * cfg.validation_fraction).round() as usize;
    if n_val > 0 {
        order.shuffle(&mut rng);
    }
    let (val, mut train_idx) = (order[..n_val].to_vec(), order[n_val..].to_vec());
    if train_idx.is_empty() {
        return Err(NnError::EmptyDataset);
    }

    let mut report = TrainReport {
        initial_loss: mean_loss(spec, &weights, data, &train_idx)?,
        ..Default::default()
    };
    let mut adam = Adam::new(&weights);
    let mut stopper = EarlyStopping::new(cfg.early_stop_patience);
    for epoch in 1..=cfg.epochs {
        train_idx.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in train_idx.chunks(cfg.batch_size) {
            let (images, labels) = gather(data, batch);
            let (mut out, pass) = forward_layers(spec, &mut weights, &images, batch.len(), Some(&mut rng))?;
            softmax_rows(&mut out, classes);
            let loss = cross_entropy(&out, &labels, classes);
            if !loss.is_finite() || out.iter().any(|v| !v.is_finite()) {
                return Err(NnError::Divergence);
            }
            total += loss;
            let inv = 1.0 / batch.len() as f32;
            for (b, &y) in labels.iter().enumerate() {
                out[b * classes + y] -= 1.0;
            }
            out.iter_mut().for_each(|g| *g *= inv);
            let grads = backward(spec, &weights, pass, out);
            adam.step(&mut weights, grads, cfg.learning_rate);
        }
        let epoch_loss = total / train_idx.len() as f64;
        log::debug!("epoch {epoch}: loss {epoch_loss:.4}");
        report.epoch_losses.push(epoch_loss);
        if !val.is_empty() {
            let vl = mean_loss(spec, &weights, data, &val)?;
            if !vl.is_finite() {
                return Err(NnError::Divergence);
            }
            report.validation_losses.push(vl);
            if stopper.observe(vl) {
                report.stopped_at = Some(epoch);
                break;
            }
        }
    }
    Ok((weights, report))
}

/// Fraction of samples whose argmax prediction (lowest index on ties)
/// equals the label.
pub fn evaluate_accuracy(spec: &NetworkSpec, weights: &WeightStore, data: &Dataset) -> Result<f64, NnError> {
    spec.validate()?;
    weights.validate(spec)?;
    check_data(spec, data)?;
    let classes = spec.class_count()?;
    let indices: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0usize;
    predict(spec, weights, data, &indices, |p, labels| {
        correct += labels.iter().enumerate().filter(|(b, &y)| argmax(&p[b * classes..(b + 1) * classes]) == y).count();
    })?;
    Ok(correct as f64 / data.len() as f64)
}
