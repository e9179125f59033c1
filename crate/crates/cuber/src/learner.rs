//! The continual-learning training procedure.
//!
//! For the first task this is plain SGD. For later tasks the learner
//! detects per-layer regimes, then trains the new task through effective
//! weights in which each related old task's weight projection is replaced
//! by a learnable rescaling, removes gradient components inside frozen
//! subspaces, regularizes movement inside backward-transfer subspaces, and
//! demotes a backward-transfer task the moment its stored gradient stops
//! agreeing with the new task's. After convergence the scaling is folded
//! into the weights, the task's gradient snapshot is pruned and stored, and
//! fresh bases are extracted.
//!
//! # Examples
//!
//! The effective-weight construction (mirrored in the guide's "The
//! Projected Learner" chapter):
//!
//! ```
//! use cuber::learner::effective_weight;
//! use cuber::linalg::{orthonormalize, Matrix};
//!
//! let w = Matrix::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
//! let b = orthonormalize(&Matrix::new(2, 1, vec![1.0, 0.0]), 1e-10).unwrap();
//!
//! // Q = I: the construction is the identity
//! let q = Matrix::identity(1);
//! let same = effective_weight(&w, &[(&b, &q)]);
//! assert!(same.sub(&w).frob_norm() < 1e-12);
//!
//! // Q = 2I doubles the component of w inside span(b), the first column
//! let q = Matrix::identity(1).scale(2.0);
//! let doubled = effective_weight(&w, &[(&b, &q)]);
//! assert_eq!(doubled.get(0, 0), 2.0);
//! assert_eq!(doubled.get(1, 0), 6.0);
//! assert_eq!(doubled.get(0, 1), 2.0);
//! ```

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{merge_bases, project, Basis, LinalgError, Matrix};
use crate::memory::{
    collect_representations, extract_bases, snapshot_gradient, MemoryError, SubspaceMemory, MERGE_TOL,
};
use crate::network::{
    EarlyStopSchedule, EarlyStopState, LabeledData, LayerGradients, Loss, Network, NetworkError,
};
use crate::regimes::{check_degeneration, detect_regimes, CorrelationThresholds, RegimeAssignment};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

#[derive(Debug, Error)]
pub enum LearnerError {
    #[error("no basis stored for layer {layer}, task {task}")]
    MissingBasis { layer: usize, task: usize },
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Training mode: the full method plus its ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Full method: regimes 1/2/3 with backward transfer.
    Cuber,
    /// Every old task frozen via orthogonal projection.
    OrthogonalOnly,
    /// Regime 3 disabled; eligible tasks get forward transfer only.
    ForwardOnly,
    /// No projections at all.
    Plain,
    /// Joint training over all task data at once (harness-level).
    Multitask,
}

impl std::str::FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cuber" => Ok(Mode::Cuber),
            "orthogonal_only" => Ok(Mode::OrthogonalOnly),
            "forward_only" => Ok(Mode::ForwardOnly),
            "plain" => Ok(Mode::Plain),
            "multitask" => Ok(Mode::Multitask),
            other => Err(format!("unknown mode '{other}'")),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Mode::Cuber => "cuber",
            Mode::OrthogonalOnly => "orthogonal_only",
            Mode::ForwardOnly => "forward_only",
            Mode::Plain => "plain",
            Mode::Multitask => "multitask",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LearnerConfig {
    pub mode: Mode,
    pub lr: f64,
    /// Learning rate for the scaling matrices; defaults to `lr`.
    pub scaling_lr: Option<f64>,
    pub lambda: f64,
    pub thresholds: CorrelationThresholds,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// When false the run uses exactly `max_epochs` epochs at a fixed rate.
    pub early_stop: bool,
    pub snapshot_sparsity: f64,
    pub loss: Loss,
    pub seed: u64,
    /// Disables the per-epoch degeneration check (ablation for tests).
    pub disable_degeneration: bool,
}

impl LearnerConfig {
    pub fn new(mode: Mode, lr: f64, seed: u64) -> Self {
        LearnerConfig {
            mode,
            lr,
            scaling_lr: None,
            lambda: 1.0,
            thresholds: CorrelationThresholds::default(),
            batch_size: 10,
            max_epochs: 5,
            early_stop: false,
            snapshot_sparsity: 0.9,
            loss: Loss::CrossEntropy,
            seed,
            disable_degeneration: false,
        }
    }

    pub fn validate(&self) -> Result<(), LearnerError> {
        if self.lr <= 0.0 {
            return Err(LearnerError::BadConfig("lr must be positive".into()));
        }
        if self.lambda < 0.0 {
            return Err(LearnerError::BadConfig("lambda must be nonnegative".into()));
        }
        self.thresholds.validate().map_err(LearnerError::BadConfig)
    }

    fn beta(&self) -> f64 {
        self.scaling_lr.unwrap_or(self.lr)
    }
}

/// Scaling matrices keyed by (layer, old task).
pub type ScalingMatrices = BTreeMap<(usize, usize), Matrix>;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DegenerationEvent {
    pub epoch: usize,
    pub layer: usize,
    pub task: usize,
}

/// Outcome of learning one task.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskResult {
    pub task: usize,
    /// Final regime assignment (after any degenerations).
    pub regimes: Option<RegimeAssignment>,
    /// Assignment as detected before training began.
    pub initial_regimes: Option<RegimeAssignment>,
    pub degenerations: Vec<DegenerationEvent>,
    pub epochs: usize,
    pub epoch_losses: Vec<f64>,
    /// Pre-fold movement inside each stored subspace:
    /// (layer, old task, ||(w - w_prev) B||_F).
    pub subspace_interference: Vec<(usize, usize, f64)>,
    /// Filled by the harness after evaluating tasks 0..=task.
    pub accuracies: Vec<f64>,
}

/// w + sum_j [ w B_j Q_j B_j' - w B_j B_j' ] for the given (basis, Q) pairs.
pub fn effective_weight(w: &Matrix, terms: &[(&Basis, &Matrix)]) -> Matrix {
    let mut out = w.clone();
    for (basis, q) in terms {
        if basis.is_empty() {
            continue;
        }
        let wb = w.matmul(basis.matrix());
        let k = basis.num_cols();
        let q_minus_i = {
            let mut m = (*q).clone();
            for i in 0..k {
                let v = m.get(i, i) - 1.0;
                m.set(i, i, v);
            }
            m
        };
        let term = wb.matmul(&q_minus_i).matmul(&basis.matrix().transpose());
        out = out.add(&term);
    }
    out
}

/// Chain-rule pullback of the effective-weight construction: given the loss
/// gradient `g_eff` w.r.t. the effective weight, returns the gradient
/// w.r.t. the raw weight.
pub fn pull_back_gradient(g_eff: &Matrix, terms: &[(&Basis, &Matrix)]) -> Matrix {
    let mut out = g_eff.clone();
    for (basis, q) in terms {
        if basis.is_empty() {
            continue;
        }
        let gb = g_eff.matmul(basis.matrix());
        let k = basis.num_cols();
        let qt_minus_i = {
            let mut m = q.transpose();
            for i in 0..k {
                let v = m.get(i, i) - 1.0;
                m.set(i, i, v);
            }
            m
        };
        let term = gb.matmul(&qt_minus_i).matmul(&basis.matrix().transpose());
        out = out.add(&term);
    }
    out
}

/// Gradient of the loss w.r.t. one scaling matrix: B' w' G B.
pub fn scaling_gradient(w: &Matrix, g_eff: &Matrix, basis: &Basis) -> Matrix {
    let wb = w.matmul(basis.matrix());
    let gb = g_eff.matmul(basis.matrix());
    wb.transpose().matmul(&gb)
}

/// Removes every component of `grad` inside the union of the listed
/// subspaces. Orthogonalizing the concatenation first makes the removal
/// exact even when the bases overlap.
pub fn project_out_gradient(grad: &Matrix, bases: &[&Basis]) -> Result<Matrix, LinalgError> {
    if bases.is_empty() {
        return Ok(grad.clone());
    }
    let union = merge_bases(bases, MERGE_TOL)?;
    Ok(grad.sub(&project(grad, &union)?))
}

/// Squared-projection-norm regularizer on the model change:
/// value = lambda * sum_j ||Proj_j(w - w_prev)||_F^2, with gradient
/// 2 * lambda * sum_j Proj_j(w - w_prev).
pub fn regime3_regularizer_grad(
    w: &Matrix,
    w_prev: &Matrix,
    bases: &[&Basis],
    lambda: f64,
) -> Result<(f64, Matrix), LinalgError> {
    let delta = w.sub(w_prev);
    let mut value = 0.0;
    let mut grad = Matrix::zeros(w.rows(), w.cols());
    for basis in bases {
        let p = project(&delta, basis)?;
        value += lambda * p.frob_norm().powi(2);
        grad.add_assign_scaled(&p, 2.0 * lambda);
    }
    Ok((value, grad))
}

/// Weight-layer indices that participate in the projection machinery: all
/// hidden layers, plus the shared head in single-head mode.
pub fn projected_layers(net: &Network) -> Vec<usize> {
    let mut layers: Vec<usize> = (0..net.hidden.len()).collect();
    if !net.is_multi_head() {
        layers.push(net.hidden.len());
    }
    layers
}

struct LayerPlan {
    /// (task, basis, q-key) for regimes 2 and 3 of this layer.
    reg23: Vec<usize>,
}

/// Learns one task in sequence, updating the network and the memory.
pub fn learn_task(
    net: &mut Network,
    task: usize,
    train: &LabeledData,
    valid: Option<&LabeledData>,
    memory: &mut SubspaceMemory,
    config: &LearnerConfig,
) -> Result<TaskResult, LearnerError> {
    config.validate()?;
    if train.len() == 0 {
        return Err(NetworkError::EmptyDataset.into());
    }
    net.ensure_head(task, train.num_classes(), config.seed);

    let owned_split;
    let (train, valid): (&LabeledData, &LabeledData) = match valid {
        Some(v) => (train, v),
        None => {
            owned_split = train.split_validation(0.1, config.seed ^ 0x5eed);
            (&owned_split.0, &owned_split.1)
        }
    };

    let old_tasks: Vec<usize> = memory.tasks().into_iter().filter(|&t| t < task).collect();
    let plain = config.mode == Mode::Plain || config.mode == Mode::Multitask || old_tasks.is_empty();

    let mut result = TaskResult {
        task,
        regimes: None,
        initial_regimes: None,
        degenerations: Vec::new(),
        epochs: 0,
        epoch_losses: Vec::new(),
        subspace_interference: Vec::new(),
        accuracies: Vec::new(),
    };

    if plain {
        train_plain(net, task, train, valid, config, &mut result)?;
    } else {
        train_projected(net, task, train, valid, memory, config, &mut result)?;
    }

    store_task_memory(net, task, train, memory, config)?;
    Ok(result)
}

fn train_plain(
    net: &mut Network,
    task: usize,
    train: &LabeledData,
    valid: &LabeledData,
    config: &LearnerConfig,
    result: &mut TaskResult,
) -> Result<(), LearnerError> {
    if config.early_stop {
        let schedule = EarlyStopSchedule::new(config.lr, config.max_epochs);
        let stats = net.train_with_early_stop(
            train,
            valid,
            task,
            &schedule,
            config.batch_size,
            config.loss,
            config.seed,
            |_| {},
        )?;
        result.epochs = stats.epochs;
        result.epoch_losses = stats.epoch_losses;
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        for _ in 0..config.max_epochs {
            let loss = net.sgd_epoch(train, task, config.lr, config.batch_size, config.loss, &mut rng, |_| {})?;
            result.epochs += 1;
            result.epoch_losses.push(loss);
        }
    }
    Ok(())
}

fn train_projected(
    net: &mut Network,
    task: usize,
    train: &LabeledData,
    valid: &LabeledData,
    memory: &mut SubspaceMemory,
    config: &LearnerConfig,
    result: &mut TaskResult,
) -> Result<(), LearnerError> {
    let layers = projected_layers(net);

    // Detection: one forward-backward pass on a seeded batch at the
    // previous task's weights.
    let init_grads = detection_gradient(net, task, train, config)?;
    let mut assignment = detect_regimes(&init_grads, memory, &config.thresholds, &layers);
    match config.mode {
        Mode::OrthogonalOnly => {
            for lr in assignment.layers.iter_mut() {
                let mut all: Vec<usize> = lr.reg1.drain(..).chain(lr.reg2.drain(..)).chain(lr.reg3.drain(..)).collect();
                all.sort_unstable();
                all.dedup();
                lr.reg1 = all;
            }
        }
        Mode::ForwardOnly => {
            for lr in assignment.layers.iter_mut() {
                let demoted: Vec<usize> = lr.reg3.drain(..).collect();
                lr.reg2.extend(demoted);
                lr.reg2.sort_unstable();
            }
        }
        _ => {}
    }
    result.initial_regimes = Some(assignment.clone());

    // Scaling matrices start at the identity.
    let mut scaling: ScalingMatrices = BTreeMap::new();
    let mut plans: BTreeMap<usize, LayerPlan> = BTreeMap::new();
    for &l in &layers {
        let reg23 = assignment.layer(l).reg23();
        for &j in &reg23 {
            let basis = memory.basis(l, j).ok_or(LearnerError::MissingBasis { layer: l, task: j })?;
            scaling.insert((l, j), Matrix::identity(basis.num_cols()));
        }
        plans.insert(l, LayerPlan { reg23 });
    }

    // Anchor weights for the regularizer and the interference record.
    let w_prev: BTreeMap<usize, Matrix> = layers
        .iter()
        .map(|&l| Ok((l, layer_weight(net, task, l)?.clone())))
        .collect::<Result<_, LearnerError>>()?;

    // Frozen-subspace unions per layer, rebuilt when a degeneration moves a
    // task from regime 3 to regime 2.
    let mut frozen_union: BTreeMap<usize, Basis> = BTreeMap::new();
    let rebuild_union = |assignment: &RegimeAssignment, memory: &SubspaceMemory, l: usize| -> Result<Basis, LearnerError> {
        let lr = assignment.layer(l);
        let mut bases = Vec::new();
        for &j in lr.reg1.iter().chain(&lr.reg2) {
            bases.push(memory.basis(l, j).ok_or(LearnerError::MissingBasis { layer: l, task: j })?);
        }
        if bases.is_empty() {
            let dim = memory
                .layer_bases(l)
                .first()
                .map(|(_, b)| b.ambient_dim())
                .unwrap_or(0);
            Ok(Basis::empty(dim))
        } else {
            Ok(merge_bases(&bases, MERGE_TOL)?)
        }
    };
    for &l in &layers {
        frozen_union.insert(l, rebuild_union(&assignment, memory, l)?);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let schedule = EarlyStopSchedule::new(config.lr, config.max_epochs);
    let mut stop_state = EarlyStopState::new(schedule);
    let beta = config.beta();

    while stop_state.should_continue(result.epochs) {
        let lr_now = if config.early_stop { stop_state.lr() } else { config.lr };
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        // Epoch-average new-task gradient per layer, for the degeneration check.
        let mut grad_accum: BTreeMap<usize, Matrix> = BTreeMap::new();

        for chunk in order.chunks(config.batch_size.max(1)) {
            let batch = train.subset(chunk);
            let eff = build_effective_net(net, task, &plans, &scaling, memory)?;
            let trace = eff.forward(&batch.features, task)?;
            let (loss, g_eff) = eff.backward(&trace, &batch.labels, config.loss)?;
            epoch_loss += loss;
            batches += 1;

            let mut step = g_eff.clone();
            for &l in &layers {
                let plan = &plans[&l];
                let terms = scaling_terms(memory, &scaling, l, &plan.reg23)?;
                let w_l = layer_weight(net, task, l)?.clone();

                // dL/dw through the effective-weight construction.
                let mut w_grad = pull_back_gradient(&g_eff.weights[l], &terms);

                // Regularizer on movement inside regime-3 subspaces.
                let reg3 = &assignment.layer(l).reg3;
                if config.lambda > 0.0 && !reg3.is_empty() {
                    let bases: Vec<&Basis> = reg3
                        .iter()
                        .map(|&j| memory.basis(l, j).ok_or(LearnerError::MissingBasis { layer: l, task: j }))
                        .collect::<Result<_, _>>()?;
                    let (_, rgrad) = regime3_regularizer_grad(&w_l, &w_prev[&l], &bases, config.lambda)?;
                    w_grad = w_grad.add(&rgrad);
                }

                // Remove components inside frozen subspaces (regimes 1 and 2).
                let union = &frozen_union[&l];
                if !union.is_empty() {
                    w_grad = w_grad.sub(&project(&w_grad, union)?);
                }

                // Scaling-matrix steps.
                for &j in &plan.reg23 {
                    let basis = memory.basis(l, j).ok_or(LearnerError::MissingBasis { layer: l, task: j })?;
                    let gq = scaling_gradient(&w_l, &g_eff.weights[l], basis);
                    scaling.get_mut(&(l, j)).expect("scaling initialized").add_assign_scaled(&gq, -beta);
                }

                grad_accum
                    .entry(l)
                    .and_modify(|m| m.add_assign_scaled(&g_eff.weights[l], 1.0))
                    .or_insert_with(|| g_eff.weights[l].clone());
                step.weights[l] = w_grad;
            }
            net.apply_step(&step, task, lr_now)?;
        }

        result.epochs += 1;
        result.epoch_losses.push(epoch_loss / batches.max(1) as f64);

        // Degeneration: compare each regime-3 task's stored gradient with
        // this epoch's average new-task gradient.
        if !config.disable_degeneration {
            for &l in &layers {
                let avg = match grad_accum.get(&l) {
                    Some(m) => m.scale(1.0 / batches.max(1) as f64),
                    None => continue,
                };
                let reg3_now: Vec<usize> = assignment.layer(l).reg3.clone();
                for j in reg3_now {
                    let snap = match memory.snapshot_layer(l, j) {
                        Some(s) => s,
                        None => continue,
                    };
                    if !check_degeneration(snap, &avg, config.thresholds.eps2) {
                        assignment.degenerate(l, j);
                        result.degenerations.push(DegenerationEvent { epoch: result.epochs, layer: l, task: j });
                        frozen_union.insert(l, rebuild_union(&assignment, memory, l)?);
                    }
                }
            }
        }

        if config.early_stop {
            let eff = build_effective_net(net, task, &plans, &scaling, memory)?;
            let vloss = eff.mean_loss(valid, task, config.loss)?;
            stop_state.observe(vloss);
        }
    }

    // Pre-fold interference record: how far each layer moved inside every
    // stored subspace during training.
    for &l in &layers {
        let w_now = layer_weight(net, task, l)?.clone();
        let delta = w_now.sub(&w_prev[&l]);
        for (j, basis) in memory.layer_bases(l) {
            let moved = delta.matmul(basis.matrix()).frob_norm();
            result.subspace_interference.push((l, j, moved));
        }
    }

    // Fold the scaled projections into the stored weights so evaluation and
    // future tasks see one weight set.
    for &l in &layers {
        let plan = &plans[&l];
        if plan.reg23.is_empty() {
            continue;
        }
        let terms = scaling_terms(memory, &scaling, l, &plan.reg23)?;
        let folded = effective_weight(layer_weight(net, task, l)?, &terms);
        *layer_weight_mut(net, task, l)? = folded;
    }

    result.regimes = Some(assignment);
    Ok(())
}

fn scaling_terms<'a>(
    memory: &'a SubspaceMemory,
    scaling: &'a ScalingMatrices,
    layer: usize,
    reg23: &[usize],
) -> Result<Vec<(&'a Basis, &'a Matrix)>, LearnerError> {
    reg23
        .iter()
        .map(|&j| {
            let basis = memory.basis(layer, j).ok_or(LearnerError::MissingBasis { layer, task: j })?;
            let q = scaling.get(&(layer, j)).ok_or(LearnerError::MissingBasis { layer, task: j })?;
            Ok((basis, q))
        })
        .collect()
}

fn layer_weight<'a>(net: &'a Network, task: usize, l: usize) -> Result<&'a Matrix, LearnerError> {
    if l < net.hidden.len() {
        Ok(&net.hidden[l].weight)
    } else {
        Ok(&net.head(task)?.weight)
    }
}

fn layer_weight_mut<'a>(net: &'a mut Network, task: usize, l: usize) -> Result<&'a mut Matrix, LearnerError> {
    if l < net.hidden.len() {
        Ok(&mut net.hidden[l].weight)
    } else {
        Ok(&mut net.head_mut(task)?.weight)
    }
}

/// Network whose projected layers carry effective weights built from the
/// current scaling matrices.
fn build_effective_net(
    net: &Network,
    task: usize,
    plans: &BTreeMap<usize, LayerPlan>,
    scaling: &ScalingMatrices,
    memory: &SubspaceMemory,
) -> Result<Network, LearnerError> {
    let mut eff = net.clone();
    for (&l, plan) in plans {
        if plan.reg23.is_empty() {
            continue;
        }
        let terms = scaling_terms(memory, scaling, l, &plan.reg23)?;
        let w = layer_weight(net, task, l)?;
        *layer_weight_mut(&mut eff, task, l)? = effective_weight(w, &terms);
    }
    Ok(eff)
}

/// One seeded batch, forward-backward at the current weights.
fn detection_gradient(
    net: &Network,
    task: usize,
    train: &LabeledData,
    config: &LearnerConfig,
) -> Result<LayerGradients, LearnerError> {
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0xde7ec7);
    order.shuffle(&mut rng);
    order.truncate(config.batch_size.max(1).min(train.len()));
    let batch = train.subset(&order);
    let trace = net.forward(&batch.features, task)?;
    let (_, grads) = net.backward(&trace, &batch.labels, config.loss)?;
    Ok(grads)
}

/// Stores the pruned full-data average gradient and freshly extracted bases
/// for the finished task.
fn store_task_memory(
    net: &Network,
    task: usize,
    train: &LabeledData,
    memory: &mut SubspaceMemory,
    config: &LearnerConfig,
) -> Result<(), LearnerError> {
    // Full-data average gradient at the final weights, batched only to
    // bound memory; means are sample-weighted so the result is exact.
    let mut total = LayerGradients::zeros_like(net, task)?;
    let n = train.len();
    let mut row = 0usize;
    while row < n {
        let hi = (row + 256).min(n);
        let idx: Vec<usize> = (row..hi).collect();
        let batch = train.subset(&idx);
        let trace = net.forward(&batch.features, task)?;
        let (_, grads) = net.backward(&trace, &batch.labels, config.loss)?;
        let weight = (hi - row) as f64 / n as f64;
        for (t, g) in total.weights.iter_mut().zip(&grads.weights) {
            t.add_assign_scaled(g, weight);
        }
        row = hi;
    }
    memory.insert_snapshot(task, snapshot_gradient(&total, config.snapshot_sparsity)?);

    let n_samples = memory.extraction.n_samples;
    let eps_th = memory.extraction.eps_th(task);
    let rep = collect_representations(net, train, task, n_samples, config.seed ^ 0xba5e5)?;
    for &l in &projected_layers(net) {
        let old: Vec<&Basis> = memory.layer_bases(l).into_iter().map(|(_, b)| b).collect();
        let basis = extract_bases(&rep.layers[l], &old, eps_th)?;
        memory.insert_basis(l, task, basis);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::orthonormalize;
    use crate::memory::ExtractionConfig;
    use rand::Rng;

    fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::new(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    fn rand_basis(rng: &mut ChaCha8Rng, dim: usize, k: usize) -> Basis {
        orthonormalize(&rand_matrix(rng, dim, k), 1e-10).unwrap()
    }

    #[test]
    fn effective_weight_identity_scaling_is_noop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = rand_matrix(&mut rng, 3, 4);
        let b = rand_basis(&mut rng, 4, 2);
        let q = Matrix::identity(2);
        let eff = effective_weight(&w, &[(&b, &q)]);
        assert!(eff.sub(&w).frob_norm() < 1e-12);
    }

    #[test]
    fn effective_weight_zero_scaling_strips_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = rand_matrix(&mut rng, 3, 4);
        let b = rand_basis(&mut rng, 4, 2);
        let q = Matrix::zeros(2, 2);
        let eff = effective_weight(&w, &[(&b, &q)]);
        let expect = w.sub(&project(&w, &b).unwrap());
        assert!(eff.sub(&expect).frob_norm() < 1e-12);
    }

    #[test]
    fn effective_weight_scalar_doubling() {
        // 1-dim basis e1, Q = [2]: column 1's projection is doubled.
        let w = Matrix::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let b = Basis::from_orthonormal(Matrix::new(2, 1, vec![1.0, 0.0]));
        let q = Matrix::new(1, 1, vec![2.0]);
        let eff = effective_weight(&w, &[(&b, &q)]);
        let expect = Matrix::new(2, 2, vec![2.0, 2.0, 6.0, 4.0]);
        assert!(eff.sub(&expect).frob_norm() < 1e-12);
    }

    #[test]
    fn project_out_gradient_cases() {
        let g = Matrix::row_vector(&[1.0, 1.0]);
        assert_eq!(project_out_gradient(&g, &[]).unwrap(), g);

        let e1 = Basis::from_orthonormal(Matrix::new(2, 1, vec![1.0, 0.0]));
        let out = project_out_gradient(&g, &[&e1]).unwrap();
        assert!((out.get(0, 0)).abs() < 1e-12);
        assert!((out.get(0, 1) - 1.0).abs() < 1e-12);

        // gradient fully inside a listed span -> zero
        let inside = Matrix::row_vector(&[3.0, 0.0]);
        let out = project_out_gradient(&inside, &[&e1]).unwrap();
        assert!(out.frob_norm() < 1e-12);
    }

    #[test]
    fn project_out_overlapping_bases_still_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b1 = rand_basis(&mut rng, 5, 2);
        let b2 = rand_basis(&mut rng, 5, 3);
        let g = rand_matrix(&mut rng, 4, 5);
        let out = project_out_gradient(&g, &[&b1, &b2]).unwrap();
        for b in [&b1, &b2] {
            let residual = out.matmul(b.matrix());
            assert!(residual.frob_norm() < 1e-9, "residual {}", residual.frob_norm());
        }
    }

    #[test]
    fn regularizer_zero_at_anchor() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = rand_matrix(&mut rng, 3, 4);
        let b = rand_basis(&mut rng, 4, 2);
        let (v, g) = regime3_regularizer_grad(&w, &w, &[&b], 1.0).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.frob_norm() < 1e-15);
    }

    #[test]
    fn regularizer_orthogonal_delta_is_free() {
        // delta along e2, subspace span(e1)
        let w_prev = Matrix::new(1, 2, vec![0.0, 0.0]);
        let w = Matrix::new(1, 2, vec![0.0, 5.0]);
        let b = Basis::from_orthonormal(Matrix::new(2, 1, vec![1.0, 0.0]));
        let (v, _) = regime3_regularizer_grad(&w, &w_prev, &[&b], 1.0).unwrap();
        assert!(v < 1e-15);
    }

    #[test]
    fn regularizer_closed_form() {
        // delta = e1 row delta, basis {e1}, lambda = 1: value 1, grad = 2 delta
        let w_prev = Matrix::new(1, 2, vec![0.0, 0.0]);
        let w = Matrix::new(1, 2, vec![1.0, 0.0]);
        let b = Basis::from_orthonormal(Matrix::new(2, 1, vec![1.0, 0.0]));
        let (v, g) = regime3_regularizer_grad(&w, &w_prev, &[&b], 1.0).unwrap();
        assert!((v - 1.0).abs() < 1e-12);
        assert!(g.sub(&w.scale(2.0)).frob_norm() < 1e-12);
    }

    #[test]
    fn scaling_gradient_zero_loss_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = rand_matrix(&mut rng, 3, 4);
        let b = rand_basis(&mut rng, 4, 2);
        let gq = scaling_gradient(&w, &Matrix::zeros(3, 4), &b);
        assert!(gq.frob_norm() < 1e-15);
    }

    #[test]
    fn scaling_gradient_matches_finite_differences() {
        // J(Q) = <G, effective_weight(w, Q)> is linear in Q, so finite
        // differences of it recover B' w' G B exactly up to roundoff.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..10 {
            let w = rand_matrix(&mut rng, 3, 5);
            let b = rand_basis(&mut rng, 5, 2);
            let g = rand_matrix(&mut rng, 3, 5);
            let q0 = rand_matrix(&mut rng, 2, 2);
            let analytic = scaling_gradient(&w, &g, &b);
            let h = 1e-5;
            for r in 0..2 {
                for c in 0..2 {
                    let mut qp = q0.clone();
                    qp.set(r, c, q0.get(r, c) + h);
                    let mut qm = q0.clone();
                    qm.set(r, c, q0.get(r, c) - h);
                    let jp = crate::linalg::flat_inner(&g, &effective_weight(&w, &[(&b, &qp)])).unwrap();
                    let jm = crate::linalg::flat_inner(&g, &effective_weight(&w, &[(&b, &qm)])).unwrap();
                    let fd = (jp - jm) / (2.0 * h);
                    let a = analytic.get(r, c);
                    assert!((fd - a).abs() / a.abs().max(1e-4) < 1e-4, "fd {fd} vs {a}");
                }
            }
        }
    }

    #[test]
    fn pull_back_matches_finite_differences() {
        // J(w) = <G, effective_weight(w, Q)> for fixed G, Q.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = rand_matrix(&mut rng, 2, 4);
        let b = rand_basis(&mut rng, 4, 2);
        let q = rand_matrix(&mut rng, 2, 2);
        let g = rand_matrix(&mut rng, 2, 4);
        let analytic = pull_back_gradient(&g, &[(&b, &q)]);
        let h = 1e-6;
        for r in 0..2 {
            for c in 0..4 {
                let mut wp = w.clone();
                wp.set(r, c, w.get(r, c) + h);
                let mut wm = w.clone();
                wm.set(r, c, w.get(r, c) - h);
                let jp = crate::linalg::flat_inner(&g, &effective_weight(&wp, &[(&b, &q)])).unwrap();
                let jm = crate::linalg::flat_inner(&g, &effective_weight(&wm, &[(&b, &q)])).unwrap();
                let fd = (jp - jm) / (2.0 * h);
                let a = analytic.get(r, c);
                assert!((fd - a).abs() / a.abs().max(1e-3) < 1e-4, "fd {fd} vs {a}");
            }
        }
    }

    fn blob_task(center: &[f64], flip: bool, n: usize, seed: u64) -> LabeledData {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = center.len();
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let label = i % 2;
            let sign = if (label == 1) ^ flip { 1.0 } else { -1.0 };
            let row: Vec<f64> = center.iter().map(|&c| sign * c + rng.gen_range(-0.2..0.2)).collect();
            rows.push(row);
            labels.push(label);
        }
        let _ = dim;
        LabeledData::new(Matrix::from_rows(&rows), labels)
    }

    #[test]
    fn plain_equals_cuber_on_first_task() {
        let data = blob_task(&[1.0, 0.5, -0.5, 0.2], false, 40, 11);
        let mut cfg = LearnerConfig::new(Mode::Cuber, 0.05, 7);
        cfg.max_epochs = 3;
        let mut net_a = Network::new_mlp(4, &[6], 2, false, 99);
        let mut net_b = net_a.clone();
        let mut mem_a = SubspaceMemory::new(ExtractionConfig::default());
        let mut mem_b = SubspaceMemory::new(ExtractionConfig::default());
        learn_task(&mut net_a, 0, &data, None, &mut mem_a, &cfg).unwrap();
        cfg.mode = Mode::Plain;
        learn_task(&mut net_b, 0, &data, None, &mut mem_b, &cfg).unwrap();
        assert_eq!(net_a.hidden[0].weight, net_b.hidden[0].weight);
    }

    #[test]
    fn identical_tasks_keep_first_task_accuracy() {
        let data = blob_task(&[1.2, 0.8, -0.6, 0.4], false, 80, 21);
        let test = blob_task(&[1.2, 0.8, -0.6, 0.4], false, 40, 22);
        let mut cfg = LearnerConfig::new(Mode::Cuber, 0.05, 3);
        cfg.max_epochs = 8;
        let mut net = Network::new_mlp(4, &[8], 2, false, 1);
        let mut mem = SubspaceMemory::new(ExtractionConfig { n_samples: 64, ..Default::default() });
        learn_task(&mut net, 0, &data, None, &mut mem, &cfg).unwrap();
        let acc_after_t0 = net.evaluate(&test, 0).unwrap();
        learn_task(&mut net, 1, &data, None, &mut mem, &cfg).unwrap();
        let acc_after_t1 = net.evaluate(&test, 0).unwrap();
        assert!(
            acc_after_t1 >= acc_after_t0 - 0.01,
            "task-0 accuracy dropped from {acc_after_t0} to {acc_after_t1}"
        );
    }

    #[test]
    fn orthogonal_only_never_moves_in_stored_subspaces() {
        let t0 = blob_task(&[1.0, 0.3, -0.2, 0.7], false, 60, 31);
        let t1 = blob_task(&[-0.4, 1.0, 0.6, -0.8], true, 60, 32);
        let mut cfg = LearnerConfig::new(Mode::OrthogonalOnly, 0.05, 5);
        cfg.max_epochs = 5;
        let mut net = Network::new_mlp(4, &[8], 2, false, 2);
        let mut mem = SubspaceMemory::new(ExtractionConfig { n_samples: 48, ..Default::default() });
        learn_task(&mut net, 0, &t0, None, &mut mem, &cfg).unwrap();
        let result = learn_task(&mut net, 1, &t1, None, &mut mem, &cfg).unwrap();
        for (layer, task, moved) in &result.subspace_interference {
            assert!(*moved <= 1e-6, "layer {layer} moved {moved} inside task {task}'s subspace");
        }
    }

    #[test]
    fn fold_with_identity_q_and_zero_steps_is_noop() {
        let t0 = blob_task(&[1.0, 0.3, -0.2, 0.7], false, 40, 41);
        let t1 = blob_task(&[0.9, 0.4, -0.1, 0.6], false, 40, 42);
        let mut cfg = LearnerConfig::new(Mode::Cuber, 0.05, 5);
        cfg.max_epochs = 3;
        let mut net = Network::new_mlp(4, &[6], 2, false, 3);
        let mut mem = SubspaceMemory::new(ExtractionConfig { n_samples: 32, ..Default::default() });
        learn_task(&mut net, 0, &t0, None, &mut mem, &cfg).unwrap();
        let before = net.clone();
        // zero epochs: detection and fold run, no steps are taken
        cfg.max_epochs = 0;
        learn_task(&mut net, 1, &t1, None, &mut mem, &cfg).unwrap();
        for (a, b) in net.hidden.iter().zip(&before.hidden) {
            assert!(a.weight.sub(&b.weight).frob_norm() < 1e-12, "weights changed with zero training steps");
        }
    }

    #[test]
    fn degeneration_is_one_way() {
        let mut a = RegimeAssignment {
            layers: vec![crate::regimes::LayerRegimes {
                reg3: vec![0],
                ..Default::default()
            }],
        };
        assert!(a.degenerate(0, 0));
        assert!(!a.degenerate(0, 0));
        assert_eq!(a.layer(0).reg2, vec![0]);
    }
}
