//! Fully-connected networks with per-layer input capture, analytic
//! backpropagation for cross-entropy and mean-squared-error losses, and a
//! seeded SGD loop with validation-driven learning-rate decay.
//!
//! Layer indexing convention used throughout the crate: a network with
//! hidden layers `0..L-1` exposes `L` weight slots per task, the last one
//! being the classifier head. In single-head mode the head is a shared
//! layer; in multi-head mode each task owns its head.
//!
//! # Examples
//!
//! One forward-backward pass (mirrored in the guide's "Networks and
//! Training" chapter):
//!
//! ```
//! use cuber::network::{LabeledData, Loss, Network};
//! use cuber::linalg::Matrix;
//!
//! let data = LabeledData::new(
//!     Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]),
//!     vec![0, 1],
//! );
//! let net = Network::new_mlp(2, &[4], 2, false, 42);
//! let trace = net.forward(&data.features, 0).unwrap();
//! let (loss, grads) = net.backward(&trace, &data.labels, Loss::CrossEntropy).unwrap();
//!
//! assert!(loss.is_finite());
//! // one weight gradient per layer, shapes matching the weights
//! assert_eq!(grads.weights.len(), net.num_layers());
//! ```

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Matrix;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("no head registered for task {0}")]
    UnknownTask(usize),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Matrix, // out_dim x in_dim
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    /// Uniform(-a, a) init with a = sqrt(6 / (in + out)).
    pub fn init(in_dim: usize, out_dim: usize, activation: Activation, rng: &mut ChaCha8Rng) -> Self {
        let a = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let data = (0..out_dim * in_dim).map(|_| rng.gen_range(-a..a)).collect();
        Layer { weight: Matrix::new(out_dim, in_dim, data), bias: vec![0.0; out_dim], activation }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Heads {
    Single(Layer),
    Multi(BTreeMap<usize, Layer>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Network {
    pub hidden: Vec<Layer>,
    pub heads: Heads,
}

impl Network {
    /// Builds a ReLU MLP with the given hidden dimensions. In single-head
    /// mode the shared head is created immediately; multi-head networks get
    /// their heads from [`Network::ensure_head`] as tasks arrive.
    pub fn new_mlp(input_dim: usize, hidden_dims: &[usize], num_classes: usize, multi_head: bool, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut hidden = Vec::new();
        let mut prev = input_dim;
        for &h in hidden_dims {
            hidden.push(Layer::init(prev, h, Activation::Relu, &mut rng));
            prev = h;
        }
        let heads = if multi_head {
            Heads::Multi(BTreeMap::new())
        } else {
            Heads::Single(Layer::init(prev, num_classes, Activation::Identity, &mut rng))
        };
        Network { hidden, heads }
    }

    pub fn is_multi_head(&self) -> bool {
        matches!(self.heads, Heads::Multi(_))
    }

    /// Feature dimension entering the head.
    pub fn head_in_dim(&self) -> usize {
        self.hidden.last().map(|l| l.out_dim()).unwrap_or_else(|| match &self.heads {
            Heads::Single(h) => h.in_dim(),
            Heads::Multi(m) => m.values().next().map(|h| h.in_dim()).unwrap_or(0),
        })
    }

    /// Number of weight slots (hidden layers + head).
    pub fn num_layers(&self) -> usize {
        self.hidden.len() + 1
    }

    /// Creates the head for `task` in multi-head mode if absent; seeded per
    /// task so runs are reproducible regardless of task arrival order.
    pub fn ensure_head(&mut self, task: usize, num_classes: usize, seed: u64) {
        if let Heads::Multi(map) = &mut self.heads {
            map.entry(task).or_insert_with(|| {
                let in_dim = self.hidden.last().map(|l| l.out_dim()).unwrap_or(0);
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (task as u64).wrapping_mul(0x9e3779b97f4a7c15));
                Layer::init(in_dim, num_classes, Activation::Identity, &mut rng)
            });
        }
    }

    pub fn head(&self, task: usize) -> Result<&Layer, NetworkError> {
        match &self.heads {
            Heads::Single(h) => Ok(h),
            Heads::Multi(m) => m.get(&task).ok_or(NetworkError::UnknownTask(task)),
        }
    }

    pub fn head_mut(&mut self, task: usize) -> Result<&mut Layer, NetworkError> {
        match &mut self.heads {
            Heads::Single(h) => Ok(h),
            Heads::Multi(m) => m.get_mut(&task).ok_or(NetworkError::UnknownTask(task)),
        }
    }

    /// Forward pass capturing the input of every weight layer (the head's
    /// input is the last entry).
    pub fn forward(&self, batch: &Matrix, task: usize) -> Result<ForwardTrace, NetworkError> {
        let first_in = self
            .hidden
            .first()
            .map(|l| l.in_dim())
            .unwrap_or_else(|| self.head(task).map(|h| h.in_dim()).unwrap_or(0));
        if batch.cols() != first_in {
            return Err(NetworkError::DimMismatch(format!(
                "batch has {} features, network expects {}",
                batch.cols(),
                first_in
            )));
        }
        let mut inputs = Vec::with_capacity(self.num_layers());
        let mut pre_acts = Vec::with_capacity(self.hidden.len());
        let mut x = batch.clone();
        for layer in &self.hidden {
            inputs.push(x.clone());
            let z = affine(&x, layer);
            x = match layer.activation {
                Activation::Relu => relu(&z),
                Activation::Identity => z.clone(),
            };
            pre_acts.push(z);
        }
        let head = self.head(task)?;
        inputs.push(x.clone());
        let logits = affine(&x, head);
        Ok(ForwardTrace { inputs, pre_acts, logits, task })
    }

    /// Mean loss and exact gradients of the mean loss for one batch.
    pub fn backward(&self, trace: &ForwardTrace, labels: &[usize], loss_kind: Loss) -> Result<(f64, LayerGradients), NetworkError> {
        let n = trace.logits.rows();
        if labels.len() != n {
            return Err(NetworkError::DimMismatch(format!(
                "{} labels for batch of {}",
                labels.len(),
                n
            )));
        }
        let classes = trace.logits.cols();
        for &l in labels {
            if l >= classes {
                return Err(NetworkError::LabelOutOfRange { label: l, classes });
            }
        }
        let (loss, mut dlogits) = loss_and_dlogits(&trace.logits, labels, loss_kind);

        let head = self.head(trace.task)?;
        let mut weights = vec![Matrix::zeros(0, 0); self.num_layers()];
        let mut biases = vec![Vec::new(); self.num_layers()];
        let last = self.num_layers() - 1;
        weights[last] = dlogits.transpose().matmul(&trace.inputs[last]);
        biases[last] = col_sums(&dlogits);
        let mut dx = dlogits.matmul(&head.weight);
        dlogits = Matrix::zeros(0, 0);
        let _ = dlogits;

        for (l, layer) in self.hidden.iter().enumerate().rev() {
            let mut dz = dx;
            if layer.activation == Activation::Relu {
                let z = &trace.pre_acts[l];
                for r in 0..dz.rows() {
                    for c in 0..dz.cols() {
                        if z.get(r, c) <= 0.0 {
                            dz.set(r, c, 0.0);
                        }
                    }
                }
            }
            weights[l] = dz.transpose().matmul(&trace.inputs[l]);
            biases[l] = col_sums(&dz);
            dx = dz.matmul(&layer.weight);
        }
        Ok((loss, LayerGradients { weights, biases }))
    }

    /// Mean loss over a dataset without touching the weights.
    pub fn mean_loss(&self, data: &LabeledData, task: usize, loss_kind: Loss) -> Result<f64, NetworkError> {
        if data.len() == 0 {
            return Err(NetworkError::EmptyDataset);
        }
        let trace = self.forward(&data.features, task)?;
        let (loss, _) = loss_and_dlogits(&trace.logits, &data.labels, loss_kind);
        Ok(loss)
    }

    /// Classification accuracy: argmax of the logits against the labels.
    pub fn evaluate(&self, data: &LabeledData, task: usize) -> Result<f64, NetworkError> {
        if data.len() == 0 {
            return Err(NetworkError::EmptyDataset);
        }
        let trace = self.forward(&data.features, task)?;
        let mut correct = 0usize;
        for r in 0..trace.logits.rows() {
            let row = trace.logits.row(r);
            let mut best = 0usize;
            for c in 1..row.len() {
                if row[c] > row[best] {
                    best = c;
                }
            }
            if best == data.labels[r] {
                correct += 1;
            }
        }
        Ok(correct as f64 / data.len() as f64)
    }

    /// One pass over the shuffled dataset with the given gradient hook
    /// applied before each step. Returns the mean per-batch loss.
    pub fn sgd_epoch<F>(
        &mut self,
        data: &LabeledData,
        task: usize,
        lr: f64,
        batch_size: usize,
        loss_kind: Loss,
        rng: &mut ChaCha8Rng,
        mut grad_transform: F,
    ) -> Result<f64, NetworkError>
    where
        F: FnMut(&mut LayerGradients),
    {
        assert!(lr >= 0.0);
        if data.len() == 0 {
            return Err(NetworkError::EmptyDataset);
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(batch_size.max(1)) {
            let batch = data.subset(chunk);
            let trace = self.forward(&batch.features, task)?;
            let (loss, mut grads) = self.backward(&trace, &batch.labels, loss_kind)?;
            grad_transform(&mut grads);
            self.apply_step(&grads, task, lr)?;
            total += loss;
            batches += 1;
        }
        Ok(total / batches as f64)
    }

    /// w <- w - lr * grad for every hidden layer and the task head.
    pub fn apply_step(&mut self, grads: &LayerGradients, task: usize, lr: f64) -> Result<(), NetworkError> {
        let last = self.num_layers() - 1;
        for (l, layer) in self.hidden.iter_mut().enumerate() {
            layer.weight.add_assign_scaled(&grads.weights[l], -lr);
            for (b, g) in layer.bias.iter_mut().zip(&grads.biases[l]) {
                *b -= lr * g;
            }
        }
        let head = self.head_mut(task)?;
        head.weight.add_assign_scaled(&grads.weights[last], -lr);
        for (b, g) in head.bias.iter_mut().zip(&grads.biases[last]) {
            *b -= lr * g;
        }
        Ok(())
    }

    /// SGD with the validation-counter early-stopping schedule.
    pub fn train_with_early_stop<F>(
        &mut self,
        train: &LabeledData,
        valid: &LabeledData,
        task: usize,
        schedule: &EarlyStopSchedule,
        batch_size: usize,
        loss_kind: Loss,
        seed: u64,
        mut grad_transform: F,
    ) -> Result<TrainStats, NetworkError>
    where
        F: FnMut(&mut LayerGradients),
    {
        if valid.len() == 0 {
            return Err(NetworkError::EmptyDataset);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut state = EarlyStopState::new(schedule.clone());
        let mut stats = TrainStats::default();
        while state.should_continue(stats.epochs) {
            let loss = self.sgd_epoch(train, task, state.lr(), batch_size, loss_kind, &mut rng, &mut grad_transform)?;
            stats.epochs += 1;
            stats.epoch_losses.push(loss);
            let vloss = self.mean_loss(valid, task, loss_kind)?;
            state.observe(vloss);
        }
        stats.final_lr = state.lr();
        stats.lr_decays = state.decays;
        Ok(stats)
    }
}

fn affine(x: &Matrix, layer: &Layer) -> Matrix {
    let mut z = x.matmul(&layer.weight.transpose());
    for r in 0..z.rows() {
        for c in 0..z.cols() {
            let v = z.get(r, c) + layer.bias[c];
            z.set(r, c, v);
        }
    }
    z
}

fn relu(z: &Matrix) -> Matrix {
    let data = z.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
    Matrix::new(z.rows(), z.cols(), data)
}

fn col_sums(m: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for r in 0..m.rows() {
        for c in 0..m.cols() {
            out[c] += m.get(r, c);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Loss {
    CrossEntropy,
    Mse,
}

/// Mean loss over the batch and its gradient w.r.t. the logits.
fn loss_and_dlogits(logits: &Matrix, labels: &[usize], loss_kind: Loss) -> (f64, Matrix) {
    let n = logits.rows();
    let classes = logits.cols();
    let mut d = Matrix::zeros(n, classes);
    let mut loss = 0.0;
    match loss_kind {
        Loss::CrossEntropy => {
            for r in 0..n {
                let row = logits.row(r);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let sum_exp: f64 = row.iter().map(|&v| (v - max).exp()).sum();
                let log_z = max + sum_exp.ln();
                loss += log_z - row[labels[r]];
                for c in 0..classes {
                    let p = (row[c] - log_z).exp();
                    let y = if c == labels[r] { 1.0 } else { 0.0 };
                    d.set(r, c, (p - y) / n as f64);
                }
            }
        }
        Loss::Mse => {
            for r in 0..n {
                for c in 0..classes {
                    let y = if c == labels[r] { 1.0 } else { 0.0 };
                    let e = logits.get(r, c) - y;
                    loss += e * e;
                    d.set(r, c, 2.0 * e / n as f64);
                }
            }
        }
    }
    (loss / n as f64, d)
}

/// Per-layer inputs captured during a forward pass, plus the logits.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Input of each weight layer; last entry feeds the head.
    pub inputs: Vec<Matrix>,
    /// Pre-activation values of the hidden layers (for the ReLU mask).
    pub pre_acts: Vec<Matrix>,
    pub logits: Matrix,
    pub task: usize,
}

/// Gradients of the mean batch loss, one slot per weight layer (head last).
#[derive(Debug, Clone)]
pub struct LayerGradients {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

impl LayerGradients {
    pub fn zeros_like(net: &Network, task: usize) -> Result<Self, NetworkError> {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for layer in &net.hidden {
            weights.push(Matrix::zeros(layer.out_dim(), layer.in_dim()));
            biases.push(vec![0.0; layer.out_dim()]);
        }
        let head = net.head(task)?;
        weights.push(Matrix::zeros(head.out_dim(), head.in_dim()));
        biases.push(vec![0.0; head.out_dim()]);
        Ok(LayerGradients { weights, biases })
    }
}

/// Validation-counter learning-rate schedule: the counter increments every
/// time the validation loss goes up; past `patience` the rate is divided by
/// `decay` and the counter resets; training stops once the rate falls below
/// `min_lr` or `max_epochs` is reached.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EarlyStopSchedule {
    pub init_lr: f64,
    pub min_lr: f64,
    pub decay: f64,
    pub patience: usize,
    pub max_epochs: usize,
}

impl EarlyStopSchedule {
    pub fn new(init_lr: f64, max_epochs: usize) -> Self {
        EarlyStopSchedule { init_lr, min_lr: 1e-5, decay: 2.0, patience: 6, max_epochs }
    }
}

#[derive(Debug)]
pub struct EarlyStopState {
    schedule: EarlyStopSchedule,
    lr: f64,
    counter: usize,
    best: f64,
    stopped: bool,
    pub decays: usize,
}

impl EarlyStopState {
    pub fn new(schedule: EarlyStopSchedule) -> Self {
        let lr = schedule.init_lr;
        EarlyStopState { schedule, lr, counter: 0, best: f64::INFINITY, stopped: false, decays: 0 }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn should_continue(&self, epochs_done: usize) -> bool {
        !self.stopped && epochs_done < self.schedule.max_epochs
    }

    /// Feeds one validation loss; may decay the rate or stop training.
    pub fn observe(&mut self, valid_loss: f64) {
        if valid_loss > self.best {
            self.counter += 1;
            if self.counter > self.schedule.patience {
                self.counter = 0;
                self.lr /= self.schedule.decay;
                self.decays += 1;
                if self.lr < self.schedule.min_lr {
                    self.stopped = true;
                }
            }
        } else {
            self.best = valid_loss;
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainStats {
    pub epochs: usize,
    pub epoch_losses: Vec<f64>,
    pub final_lr: f64,
    pub lr_decays: usize,
}

/// Feature rows with integer class labels.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabeledData {
    pub features: Matrix,
    pub labels: Vec<usize>,
}

impl LabeledData {
    pub fn new(features: Matrix, labels: Vec<usize>) -> Self {
        assert_eq!(features.rows(), labels.len());
        LabeledData { features, labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.labels.iter().copied().max().map(|m| m + 1).unwrap_or(0)
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledData {
        let rows: Vec<Vec<f64>> = indices.iter().map(|&i| self.features.row(i).to_vec()).collect();
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        LabeledData::new(Matrix::from_rows(&rows), labels)
    }

    /// Deterministic split: a seeded shuffle sends `frac` of the rows to the
    /// second returned set.
    pub fn split_validation(&self, frac: f64, seed: u64) -> (LabeledData, LabeledData) {
        let mut order: Vec<usize> = (0..self.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);
        let n_valid = ((self.len() as f64) * frac).round() as usize;
        let n_valid = n_valid.clamp(1, self.len().saturating_sub(1).max(1));
        let (valid_idx, train_idx) = order.split_at(n_valid);
        (self.subset(train_idx), self.subset(valid_idx))
    }
}
