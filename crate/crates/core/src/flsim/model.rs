//! Desk-scale learner: softmax regression with an optional tanh hidden
//! layer, trained by mini-batch gradient descent and averaged with FedAvg.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::ClientId;
use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};

/// Share of each client's records used for training; the rest is held out.
pub const TRAIN_FRACTION: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientDataset {
    pub owner: ClientId,
    pub records: Vec<Sample>,
}

impl ClientDataset {
    /// Deterministic train/held-out split keyed by the owner and size, so a
    /// client evaluates on the same records every round.
    pub fn split(&self) -> (Vec<&Sample>, Vec<&Sample>) {
        let mut idx: Vec<usize> = (0..self.records.len()).collect();
        idx.shuffle(&mut stream(self.owner.0 as u64, Purpose::Dataset, &[self.records.len() as u64]));
        let cut = ((self.records.len() as f64 * TRAIN_FRACTION).round() as usize).clamp(1, self.records.len());
        let cut = if self.records.len() > 1 { cut.min(self.records.len() - 1) } else { cut };
        let train = idx[..cut].iter().map(|&i| &self.records[i]).collect();
        let test = idx[cut..].iter().map(|&i| &self.records[i]).collect();
        (train, test)
    }

    pub fn label_counts(&self, classes: usize) -> Vec<usize> {
        let mut c = vec![0; classes];
        for r in &self.records {
            c[r.label] += 1;
        }
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub inputs: usize,
    pub hidden: Option<usize>,
    pub classes: usize,
}

impl ModelShape {
    pub fn param_count(&self) -> usize {
        match self.hidden {
            None => self.classes * (self.inputs + 1),
            Some(h) => h * (self.inputs + 1) + self.classes * (h + 1),
        }
    }

    fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.inputs];
        d.extend(self.hidden);
        d.push(self.classes);
        d
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub shape: ModelShape,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainHyper {
    pub learning_rate: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self { learning_rate: 0.1, local_epochs: 2, batch_size: 32 }
    }
}

impl ModelParams {
    pub fn zeros(shape: ModelShape) -> Self {
        Self { shape, weights: vec![0.0; shape.param_count()] }
    }

    /// Zero output layer; a hidden layer gets uniform `±1/√fan_in` weights.
    pub fn init(shape: ModelShape, seed: u64) -> Self {
        let mut p = Self::zeros(shape);
        if let Some(h) = shape.hidden {
            let mut rng = stream(seed, Purpose::LocalTrain, &[u64::MAX]);
            let bound = 1.0 / (shape.inputs.max(1) as f64).sqrt();
            for w in &mut p.weights[..h * shape.inputs] {
                *w = rng.random_range(-bound..bound);
            }
        }
        p
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.is_finite())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.shape.inputs {
            return Err(Error::ShapeMismatch { expected: vec![self.shape.inputs], got: vec![x.len()] });
        }
        Ok(())
    }

    /// Hidden activations (empty without a hidden layer) and class probabilities.
    fn forward(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let s = self.shape;
        let w = &self.weights;
        let (h, logits) = match s.hidden {
            None => (Vec::new(), affine(&w[..s.classes * s.inputs], &w[s.classes * s.inputs..], x, s.classes)),
            Some(hn) => {
                let w1 = hn * s.inputs;
                let b1 = w1 + hn;
                let w2 = b1 + s.classes * hn;
                let h: Vec<f64> = affine(&w[..w1], &w[w1..b1], x, hn).into_iter().map(f64::tanh).collect();
                let z = affine(&w[b1..w2], &w[w2..], &h, s.classes);
                (h, z)
            }
        };
        (h, softmax(&logits))
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        let (_, p) = self.forward(x);
        argmax(&p)
    }

    pub fn accuracy<'a, I: IntoIterator<Item = &'a Sample>>(&self, samples: I) -> f64 {
        let mut n = 0usize;
        let mut ok = 0usize;
        for s in samples {
            n += 1;
            ok += (self.predict(&s.features) == s.label) as usize;
        }
        if n == 0 {
            0.0
        } else {
            ok as f64 / n as f64
        }
    }

    /// Mean cross-entropy and its gradient over `batch`.
    pub fn loss_and_gradient(&self, batch: &[&Sample]) -> Result<(f64, Vec<f64>)> {
        let s = self.shape;
        let mut grad = vec![0.0; self.weights.len()];
        let mut loss = 0.0;
        for sample in batch {
            self.check_input(&sample.features)?;
            if sample.label >= s.classes {
                return Err(Error::InvalidInput(format!("label {} outside {} classes", sample.label, s.classes)));
            }
            let x = &sample.features;
            let (h, p) = self.forward(x);
            loss -= p[sample.label].max(1e-300).ln();
            let mut dz = p;
            dz[sample.label] -= 1.0;
            match s.hidden {
                None => accumulate_affine(&mut grad, 0, s.classes * s.inputs, &dz, x),
                Some(hn) => {
                    let w1 = hn * s.inputs;
                    let b1 = w1 + hn;
                    let w2 = b1 + s.classes * hn;
                    accumulate_affine(&mut grad, b1, w2, &dz, &h);
                    let mut da = vec![0.0; hn];
                    for (c, dzc) in dz.iter().enumerate() {
                        for (j, daj) in da.iter_mut().enumerate() {
                            *daj += self.weights[b1 + c * hn + j] * dzc;
                        }
                    }
                    for (daj, hj) in da.iter_mut().zip(&h) {
                        *daj *= 1.0 - hj * hj;
                    }
                    accumulate_affine(&mut grad, 0, w1, &da, x);
                }
            }
        }
        let n = batch.len().max(1) as f64;
        grad.iter_mut().for_each(|g| *g /= n);
        Ok((loss / n, grad))
    }
}

fn affine(w: &[f64], b: &[f64], x: &[f64], rows: usize) -> Vec<f64> {
    let cols = x.len();
    (0..rows).map(|r| b[r] + w[r * cols..(r + 1) * cols].iter().zip(x).map(|(a, b)| a * b).sum::<f64>()).collect()
}

/// Adds `d xᵀ` to the weight block at `w_off` and `d` to the bias block at `b_off`.
fn accumulate_affine(grad: &mut [f64], w_off: usize, b_off: usize, d: &[f64], x: &[f64]) {
    let cols = x.len();
    for (r, dr) in d.iter().enumerate() {
        for (c, xc) in x.iter().enumerate() {
            grad[w_off + r * cols + c] += dr * xc;
        }
        grad[b_off + r] += dr;
    }
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in p.iter().enumerate() {
        if *v > p[best] {
            best = i;
        }
    }
    best
}

/// Result of one client's local training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalOutcome {
    pub params: ModelParams,
    /// Accuracy on the client's held-out records.
    pub accuracy: f64,
    pub samples: usize,
}

/// Mini-batch gradient descent from `global` on `train`, scored on `test`.
pub fn train_on(train: &[&Sample], test: &[&Sample], global: &ModelParams, hyper: &TrainHyper, seed: u64) -> Result<LocalOutcome> {
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut params = global.clone();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let batch = hyper.batch_size.max(1);
    for epoch in 0..hyper.local_epochs {
        order.shuffle(&mut stream(seed, Purpose::LocalTrain, &[epoch as u64]));
        for chunk in order.chunks(batch) {
            let b: Vec<&Sample> = chunk.iter().map(|&i| train[i]).collect();
            let (_, g) = params.loss_and_gradient(&b)?;
            for (w, gi) in params.weights.iter_mut().zip(g) {
                *w -= hyper.learning_rate * gi;
            }
        }
    }
    let accuracy = params.accuracy(test.iter().copied());
    Ok(LocalOutcome { params, accuracy, samples: train.len() })
}

pub fn local_train(dataset: &ClientDataset, global: &ModelParams, hyper: &TrainHyper, seed: u64) -> Result<LocalOutcome> {
    if dataset.records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (train, test) = dataset.split();
    train_on(&train, &test, global, hyper, seed)
}

/// Sample-count weighted mean of client models.
pub fn aggregate_fedavg(updates: &[(ModelParams, usize)]) -> Result<ModelParams> {
    let Some((first, _)) = updates.first() else {
        return Err(Error::InvalidInput("no updates to aggregate".into()));
    };
    for (p, _) in updates {
        if p.shape != first.shape || p.weights.len() != first.weights.len() {
            return Err(Error::ShapeMismatch { expected: first.shape.dims(), got: p.shape.dims() });
        }
    }
    let total: usize = updates.iter().map(|(_, n)| n).sum();
    if total == 0 {
        return Err(Error::InvalidInput("updates carry no samples".into()));
    }
    let mut out = vec![0.0; first.weights.len()];
    for (p, n) in updates {
        let w = *n as f64 / total as f64;
        for (o, v) in out.iter_mut().zip(&p.weights) {
            *o += w * v;
        }
    }
    Ok(ModelParams { shape: first.shape, weights: out })
}

/// A round is dismissed when fewer than `fraction` of the selected clients
/// delivered an update.
pub fn should_dismiss_round(received: usize, selected: usize, fraction: f64) -> bool {
    selected > 0 && (received as f64) < fraction * selected as f64
}
