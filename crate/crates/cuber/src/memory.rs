//! Per-task, per-layer subspace memory.
//!
//! After a task is learnt, each layer's input representations are collapsed
//! into an orthonormal basis (taking the old tasks' bases into account so
//! shared directions are not stored twice), and the layer-wise average
//! gradient is pruned to its largest entries and kept as a sparse snapshot.
//! Those two artifacts are everything later tasks need for correlation
//! detection and projection.
//!
//! # Examples
//!
//! Basis extraction admits directions until the energy threshold is met
//! (mirrored in the guide's "Subspace Memory" chapter):
//!
//! ```
//! use cuber::linalg::Matrix;
//! use cuber::memory::extract_bases;
//!
//! // samples concentrated along one dominant direction
//! let rep = Matrix::from_rows(&[
//!     vec![10.0, 0.1, 0.0],
//!     vec![9.8, -0.1, 0.1],
//!     vec![10.1, 0.0, -0.1],
//! ]);
//! let b = extract_bases(&rep, &[], 0.97).unwrap();
//! // one direction carries ~99.99% of the energy
//! assert_eq!(b.num_cols(), 1);
//! ```
//!
//! Snapshots keep the largest gradient entries and correlate against
//! dense gradients on their sparse support:
//!
//! ```
//! use cuber::linalg::Matrix;
//! use cuber::memory::{snapshot_gradient, sparse_cosine};
//! use cuber::network::LayerGradients;
//!
//! let grads = LayerGradients {
//!     weights: vec![Matrix::new(1, 4, vec![4.0, -3.0, 0.2, 0.1])],
//!     biases: vec![vec![0.0]],
//! };
//! // keep the top half of the entries
//! let snap = snapshot_gradient(&grads, 0.5).unwrap();
//! assert_eq!(snap.layers[0].indices.len(), 2);
//!
//! // perfectly aligned with the dense gradient it came from, on its support
//! let c = sparse_cosine(&snap.layers[0], &grads.weights[0]);
//! assert!(c > 0.99);
//! ```

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{flat_inner, merge_bases, orthonormalize, project, svd, Basis, LinalgError, Matrix};
use crate::network::{LabeledData, LayerGradients, Network, NetworkError};

/// Tolerance for dropping duplicate directions when concatenating bases.
pub const MERGE_TOL: f64 = 1e-8;

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("epsilon threshold {0} outside (0, 1)")]
    BadThreshold(f64),
    #[error("sparsity {0} outside [0, 1)")]
    BadSparsity(f64),
    #[error("requested {requested} samples from dataset of {available}")]
    NotEnoughSamples { requested: usize, available: usize },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// Sparse top-k slice of one layer's flattened average gradient.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SparseLayerGrad {
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
    pub shape: (usize, usize),
}

impl SparseLayerGrad {
    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn densify(&self) -> Matrix {
        let (r, c) = self.shape;
        let mut data = vec![0.0; r * c];
        for (&i, &v) in self.indices.iter().zip(&self.values) {
            data[i] = v;
        }
        Matrix::new(r, c, data)
    }
}

/// A pruned gradient snapshot for every projected layer of one task.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradientSnapshot {
    pub layers: Vec<SparseLayerGrad>,
    pub sparsity: f64,
}

/// Per-layer representation matrices (one sample per row).
#[derive(Debug, Clone)]
pub struct RepresentationBatch {
    pub layers: Vec<Matrix>,
}

/// Basis-extraction knobs: sample count and the energy threshold schedule.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExtractionConfig {
    pub n_samples: usize,
    /// Threshold for the first task; grows by `eps_th_step` per task.
    pub eps_th_base: f64,
    pub eps_th_step: f64,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        ExtractionConfig { n_samples: 125, eps_th_base: 0.97, eps_th_step: 0.003 }
    }
}

impl ExtractionConfig {
    /// eps_th for task index `t` (0-based), capped at 0.999.
    pub fn eps_th(&self, t: usize) -> f64 {
        (self.eps_th_base + self.eps_th_step * t as f64).min(0.999)
    }
}

/// Serializes a tuple-keyed map as a list of entries; JSON maps only allow
/// string keys.
mod tuple_key_map {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(
        map: &BTreeMap<(usize, usize), Basis>,
        ser: S,
    ) -> Result<S::Ok, S::Error> {
        let entries: Vec<(&(usize, usize), &Basis)> = map.iter().collect();
        serde::Serialize::serialize(&entries, ser)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        de: D,
    ) -> Result<BTreeMap<(usize, usize), Basis>, D::Error> {
        let entries: Vec<((usize, usize), Basis)> = serde::Deserialize::deserialize(de)?;
        Ok(entries.into_iter().collect())
    }
}

/// Bases and gradient snapshots for all learnt tasks, keyed by layer index.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubspaceMemory {
    version: u32,
    /// (layer, task) -> basis.
    #[serde(with = "tuple_key_map")]
    bases: BTreeMap<(usize, usize), Basis>,
    /// task -> snapshot (one sparse slice per layer).
    snapshots: BTreeMap<usize, GradientSnapshot>,
    pub extraction: ExtractionConfig,
}

impl SubspaceMemory {
    pub fn new(extraction: ExtractionConfig) -> Self {
        SubspaceMemory { version: CHECKPOINT_VERSION, bases: BTreeMap::new(), snapshots: BTreeMap::new(), extraction }
    }

    pub fn tasks(&self) -> Vec<usize> {
        self.snapshots.keys().copied().collect()
    }

    pub fn num_tasks(&self) -> usize {
        self.snapshots.len()
    }

    pub fn basis(&self, layer: usize, task: usize) -> Option<&Basis> {
        self.bases.get(&(layer, task))
    }

    pub fn snapshot(&self, task: usize) -> Option<&GradientSnapshot> {
        self.snapshots.get(&task)
    }

    pub fn snapshot_layer(&self, layer: usize, task: usize) -> Option<&SparseLayerGrad> {
        self.snapshots.get(&task).and_then(|s| s.layers.get(layer))
    }

    pub fn insert_basis(&mut self, layer: usize, task: usize, basis: Basis) {
        self.bases.insert((layer, task), basis);
    }

    pub fn insert_snapshot(&mut self, task: usize, snapshot: GradientSnapshot) {
        self.snapshots.insert(task, snapshot);
    }

    /// All stored bases for `layer` from tasks in ascending task order.
    pub fn layer_bases(&self, layer: usize) -> Vec<(usize, &Basis)> {
        self.bases
            .range((layer, 0)..(layer + 1, 0))
            .map(|(&(_, task), b)| (task, b))
            .collect()
    }

    /// JSON checkpoint; `serde_json` prints shortest round-trip floats, so
    /// save/load is exact.
    pub fn save_json(&self) -> String {
        serde_json::to_string(self).expect("memory serializes")
    }

    pub fn load_json(s: &str) -> Result<Self, MemoryError> {
        let mem: SubspaceMemory =
            serde_json::from_str(s).map_err(|e| MemoryError::Checkpoint(e.to_string()))?;
        if mem.version != CHECKPOINT_VERSION {
            return Err(MemoryError::Checkpoint(format!(
                "unsupported checkpoint version {}",
                mem.version
            )));
        }
        Ok(mem)
    }
}

/// Runs the learnt model over `n` seeded samples (drawn without
/// replacement) and stacks each layer's inputs as rows.
pub fn collect_representations(
    net: &Network,
    data: &LabeledData,
    task: usize,
    n: usize,
    seed: u64,
) -> Result<RepresentationBatch, MemoryError> {
    if data.len() == 0 {
        return Err(NetworkError::EmptyDataset.into());
    }
    let n = n.min(data.len());
    let batch = if n == data.len() {
        data.clone()
    } else {
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);
        order.truncate(n);
        order.sort_unstable();
        data.subset(&order)
    };
    let trace = net.forward(&batch.features, task)?;
    Ok(RepresentationBatch { layers: trace.inputs })
}

/// Picks the basis for a new task from the pooled old directions and the
/// residual's singular directions, admitting candidates greedily by
/// representation energy until the `eps_th` fraction of the total energy is
/// covered.
pub fn extract_bases(rep: &Matrix, old_bases: &[&Basis], eps_th: f64) -> Result<Basis, MemoryError> {
    if !(0.0 < eps_th && eps_th < 1.0) {
        return Err(MemoryError::BadThreshold(eps_th));
    }
    let dim = rep.cols();
    let old = if old_bases.is_empty() {
        Basis::empty(dim)
    } else {
        merge_bases(old_bases, MERGE_TOL)?
    };
    let residual = rep.sub(&project(rep, &old)?);

    // Candidate directions: columns of the old union plus the residual's
    // input-space singular directions (rows are samples, so transpose).
    let mut candidates: Vec<Vec<f64>> = Vec::new();
    for c in 0..old.num_cols() {
        candidates.push(old.matrix().col(c));
    }
    if residual.frob_norm() > 1e-12 {
        let r = svd(&residual.transpose())?;
        let max_sigma = r.singular_values.first().copied().unwrap_or(0.0);
        for (k, &sigma) in r.singular_values.iter().enumerate() {
            if sigma > crate::linalg::RANK_TOL * max_sigma {
                candidates.push(r.u.col(k));
            }
        }
    }

    // One commensurable score for old and new directions alike.
    let mut scored: Vec<(f64, usize)> = candidates
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let dir = Matrix::new(dim, 1, v.clone());
            let rv = rep.matmul(&dir);
            (rv.frob_norm().powi(2), i)
        })
        .collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));

    let total = rep.frob_norm().powi(2);
    let target = eps_th * total;
    let mut admitted = Vec::new();
    let mut cum = 0.0;
    for &(energy, idx) in &scored {
        if cum >= target && !admitted.is_empty() {
            break;
        }
        admitted.push(idx);
        cum += energy;
    }

    let mut cols = Matrix::zeros(dim, admitted.len());
    for (k, &idx) in admitted.iter().enumerate() {
        for r in 0..dim {
            cols.set(r, k, candidates[idx][r]);
        }
    }
    Ok(orthonormalize(&cols, MERGE_TOL)?)
}

/// Flattens each layer's weight gradient and keeps the top
/// `ceil((1 - sparsity) * len)` entries by magnitude (ties to the lower
/// index), storing values with their original indices.
pub fn snapshot_gradient(grads: &LayerGradients, sparsity: f64) -> Result<GradientSnapshot, MemoryError> {
    if !(0.0..1.0).contains(&sparsity) {
        return Err(MemoryError::BadSparsity(sparsity));
    }
    let mut layers = Vec::with_capacity(grads.weights.len());
    for g in &grads.weights {
        let flat = g.data();
        let keep = (((1.0 - sparsity) * flat.len() as f64).ceil() as usize).min(flat.len());
        let mut order: Vec<usize> = (0..flat.len()).collect();
        order.sort_by(|&i, &j| flat[j].abs().partial_cmp(&flat[i].abs()).unwrap().then(i.cmp(&j)));
        let mut kept: Vec<usize> = order.into_iter().take(keep).collect();
        kept.sort_unstable();
        let values = kept.iter().map(|&i| flat[i]).collect();
        layers.push(SparseLayerGrad { indices: kept, values, shape: (g.rows(), g.cols()) });
    }
    Ok(GradientSnapshot { layers, sparsity })
}

/// Cosine between a sparse snapshot slice and a dense gradient matrix of
/// the same layer shape; zero whenever either side has zero norm.
pub fn sparse_cosine(snapshot: &SparseLayerGrad, dense: &Matrix) -> f64 {
    debug_assert_eq!(snapshot.shape, (dense.rows(), dense.cols()));
    let flat = dense.data();
    let dot: f64 = snapshot.indices.iter().zip(&snapshot.values).map(|(&i, &v)| v * flat[i]).sum();
    let ns = snapshot.norm();
    let nd = crate::linalg::flat_norm(dense);
    if ns == 0.0 || nd == 0.0 {
        return 0.0;
    }
    dot / (ns * nd)
}

/// Dense cosine helper used by tests and diagnostics.
pub fn dense_cosine(a: &Matrix, b: &Matrix) -> f64 {
    let na = crate::linalg::flat_norm(a);
    let nb = crate::linalg::flat_norm(b);
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    flat_inner(a, b).expect("same shape") / (na * nb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Activation, Heads, Layer};

    fn identity_net(dim: usize) -> Network {
        Network {
            hidden: vec![Layer {
                weight: Matrix::identity(dim),
                bias: vec![0.0; dim],
                activation: Activation::Relu,
            }],
            heads: Heads::Single(Layer {
                weight: Matrix::identity(dim),
                bias: vec![0.0; dim],
                activation: Activation::Identity,
            }),
        }
    }

    #[test]
    fn collect_single_sample_is_that_row() {
        let net = identity_net(3);
        let data = LabeledData::new(Matrix::from_rows(&[vec![1.0, -2.0, 3.0]]), vec![0]);
        let rep = collect_representations(&net, &data, 0, 1, 9).unwrap();
        assert_eq!(rep.layers[0].row(0), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn collect_identity_layer_gives_relu_of_input() {
        let net = identity_net(2);
        let data = LabeledData::new(Matrix::from_rows(&[vec![1.0, -2.0]]), vec![0]);
        let rep = collect_representations(&net, &data, 0, 1, 0).unwrap();
        // layer-2 input = relu(identity * x)
        assert_eq!(rep.layers[1].row(0), &[1.0, 0.0]);
    }

    #[test]
    fn collect_full_dataset_ignores_seed() {
        let net = identity_net(2);
        let data = LabeledData::new(
            Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]),
            vec![0, 1],
        );
        let a = collect_representations(&net, &data, 0, 2, 1).unwrap();
        let b = collect_representations(&net, &data, 0, 2, 99).unwrap();
        assert_eq!(a.layers[0], b.layers[0]);
    }

    #[test]
    fn extract_first_task_energy_cutoff() {
        // R with singular values (10, 1): 10^2/(10^2+1^2) = 0.990 >= 0.97,
        // so a single direction is kept.
        let rep = Matrix::from_rows(&[vec![10.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]);
        let b = extract_bases(&rep, &[], 0.97).unwrap();
        assert_eq!(b.num_cols(), 1);
        // and the direction is e1
        assert!((b.matrix().get(0, 0).abs() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn extract_rep_inside_old_span() {
        let old = Basis::from_orthonormal(Matrix::new(3, 1, vec![1.0, 0.0, 0.0]));
        let rep = Matrix::from_rows(&[vec![2.0, 0.0, 0.0], vec![-1.0, 0.0, 0.0]]);
        let b = extract_bases(&rep, &[&old], 0.97).unwrap();
        assert_eq!(b.num_cols(), 1);
        let diff = b.projector().sub(&old.projector());
        assert!(diff.frob_norm() < 1e-8, "basis should be a subset of the old directions");
    }

    #[test]
    fn extract_rep_orthogonal_to_old() {
        let old = Basis::from_orthonormal(Matrix::new(3, 1, vec![0.0, 0.0, 1.0]));
        let rep = Matrix::from_rows(&[vec![5.0, 0.0, 0.0], vec![0.0, 0.1, 0.0]]);
        let b = extract_bases(&rep, &[&old], 0.97).unwrap();
        // the old direction carries zero energy; top residual direction wins
        assert!(b.num_cols() >= 1);
        let e1 = Matrix::row_vector(&[1.0, 0.0, 0.0]);
        let p = project(&e1, &b).unwrap();
        assert!((p.frob_norm() - 1.0).abs() < 1e-8);
    }

    #[test]
    fn extract_eps_monotonicity() {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let rep = Matrix::new(6, 5, (0..30).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let mut last = 0;
        for eps in [0.5, 0.8, 0.95, 0.999] {
            let b = extract_bases(&rep, &[], eps).unwrap();
            assert!(b.num_cols() >= last, "basis shrank when eps_th grew");
            last = b.num_cols();
        }
    }

    #[test]
    fn snapshot_dense_when_sparsity_zero() {
        let grads = LayerGradients {
            weights: vec![Matrix::new(2, 2, vec![1.0, -2.0, 3.0, 0.0])],
            biases: vec![vec![0.0; 2]],
        };
        let s = snapshot_gradient(&grads, 0.0).unwrap();
        assert_eq!(s.layers[0].indices, vec![0, 1, 2, 3]);
        assert_eq!(s.layers[0].densify(), grads.weights[0]);
    }

    #[test]
    fn snapshot_top_half_by_magnitude() {
        let grads = LayerGradients {
            weights: vec![Matrix::new(1, 4, vec![5.0, -3.0, 1.0, 0.0])],
            biases: vec![vec![0.0]],
        };
        let s = snapshot_gradient(&grads, 0.5).unwrap();
        assert_eq!(s.layers[0].indices, vec![0, 1]);
        assert_eq!(s.layers[0].values, vec![5.0, -3.0]);
    }

    #[test]
    fn snapshot_all_zero_gradient() {
        let grads = LayerGradients { weights: vec![Matrix::zeros(2, 5)], biases: vec![vec![0.0; 2]] };
        let s = snapshot_gradient(&grads, 0.9).unwrap();
        assert_eq!(s.layers[0].indices.len(), 1);
        assert_eq!(s.layers[0].values[0], 0.0);
    }

    #[test]
    fn sparse_cosine_examples() {
        let grads = LayerGradients {
            weights: vec![Matrix::new(1, 4, vec![1.0, 2.0, -1.0, 0.5])],
            biases: vec![vec![0.0]],
        };
        let s = snapshot_gradient(&grads, 0.0).unwrap();
        assert!((sparse_cosine(&s.layers[0], &grads.weights[0]) - 1.0).abs() < 1e-12);

        // disjoint supports -> 0
        let a = SparseLayerGrad { indices: vec![0, 1], values: vec![1.0, 1.0], shape: (1, 4) };
        let d = Matrix::new(1, 4, vec![0.0, 0.0, 2.0, 3.0]);
        assert_eq!(sparse_cosine(&a, &d), 0.0);

        // hand arithmetic: (5 - 3) / (sqrt(34) * sqrt(164))
        let snap = SparseLayerGrad { indices: vec![0, 1], values: vec![5.0, -3.0], shape: (1, 4) };
        let dense = Matrix::new(1, 4, vec![1.0, 1.0, 9.0, 9.0]);
        let expect = 2.0 / (34.0_f64.sqrt() * 164.0_f64.sqrt());
        assert!((sparse_cosine(&snap, &dense) - expect).abs() < 1e-12);

        // zero norm -> 0
        let zero = Matrix::zeros(1, 4);
        assert_eq!(sparse_cosine(&snap, &zero), 0.0);
    }

    #[test]
    fn checkpoint_round_trip_exact() {
        let mut mem = SubspaceMemory::new(ExtractionConfig::default());
        let basis = orthonormalize(&Matrix::new(3, 2, vec![1.0, 0.3, 0.2, 1.0, -0.7, 0.11]), 1e-10).unwrap();
        mem.insert_basis(0, 0, basis);
        let grads = LayerGradients {
            weights: vec![Matrix::new(2, 3, vec![0.1, -0.25, 1e-17, 3.5, 0.0, -2.0])],
            biases: vec![vec![0.0; 2]],
        };
        mem.insert_snapshot(0, snapshot_gradient(&grads, 0.5).unwrap());
        let text = mem.save_json();
        let back = SubspaceMemory::load_json(&text).unwrap();
        assert_eq!(back.basis(0, 0).unwrap().matrix(), mem.basis(0, 0).unwrap().matrix());
        assert_eq!(back.snapshot(0).unwrap().layers[0].values, mem.snapshot(0).unwrap().layers[0].values);
    }
}
