//! Layer-wise task-correlation detection.
//!
//! Before a new task is learnt, one forward-backward pass at the previous
//! weights yields an initial gradient per layer. For every old task the
//! detector measures (a) how much of that gradient lies inside the old
//! task's stored input subspace and (b) the cosine against the old task's
//! stored gradient snapshot. The two thresholds split the old tasks into
//! three regimes: freeze (1), forward transfer only (2), and
//! backward-transfer candidates (3). A per-layer cap keeps only the
//! strongest projections in regimes 2/3.
//!
//! # Examples
//!
//! Aligned gradients land in regime 3, anti-aligned ones in regime 2
//! (mirrored in the guide's "Correlation Regimes" chapter):
//!
//! ```
//! use cuber::linalg::{orthonormalize, Matrix};
//! use cuber::memory::{snapshot_gradient, ExtractionConfig, SubspaceMemory};
//! use cuber::network::LayerGradients;
//! use cuber::regimes::{detect_regimes, CorrelationThresholds};
//!
//! // old task 0 stored the x-axis of a 1x2 weight layer
//! let mut memory = SubspaceMemory::new(ExtractionConfig::default());
//! let axis = orthonormalize(&Matrix::new(2, 1, vec![1.0, 0.0]), 1e-10).unwrap();
//! memory.insert_basis(0, 0, axis);
//! let old = LayerGradients { weights: vec![Matrix::new(1, 2, vec![1.0, 0.0])], biases: vec![vec![0.0]] };
//! memory.insert_snapshot(0, snapshot_gradient(&old, 0.0).unwrap());
//!
//! // the new gradient points the same way
//! let g = LayerGradients { weights: vec![Matrix::new(1, 2, vec![2.0, 0.0])], biases: vec![vec![0.0]] };
//! let th = CorrelationThresholds { eps1: 0.5, eps2: 0.0, cap: 2 };
//! let a = detect_regimes(&g, &memory, &th, &[0]);
//!
//! // full projection, positive correlation: regime 3
//! assert_eq!(a.layer(0).reg3, vec![0]);
//!
//! // flip the gradient and the correlation condition fails: regime 2
//! let neg = LayerGradients { weights: vec![Matrix::new(1, 2, vec![-2.0, 0.0])], biases: vec![vec![0.0]] };
//! let a = detect_regimes(&neg, &memory, &th, &[0]);
//! assert_eq!(a.layer(0).reg2, vec![0]);
//! ```

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::linalg::{flat_norm, project, Matrix};
use crate::memory::{sparse_cosine, SparseLayerGrad, SubspaceMemory};
use crate::network::LayerGradients;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CorrelationThresholds {
    /// Projection-ratio threshold for regimes 2/3.
    pub eps1: f64,
    /// Cosine threshold separating regime 3 from regime 2.
    pub eps2: f64,
    /// Max old tasks per layer allowed into regimes 2/3.
    pub cap: usize,
}

impl Default for CorrelationThresholds {
    fn default() -> Self {
        CorrelationThresholds { eps1: 0.5, eps2: 0.0, cap: 2 }
    }
}

impl CorrelationThresholds {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0 < self.eps1 && self.eps1 < 1.0) {
            return Err(format!("eps1 {} outside (0, 1)", self.eps1));
        }
        if !(0.0..1.0).contains(&self.eps2) {
            return Err(format!("eps2 {} outside [0, 1)", self.eps2));
        }
        Ok(())
    }
}

/// Regime split for one layer, plus the measured statistics behind it.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LayerRegimes {
    pub reg1: Vec<usize>,
    pub reg2: Vec<usize>,
    pub reg3: Vec<usize>,
    /// Per old task: ||Proj(g)|| / ||g||.
    pub projection_ratios: BTreeMap<usize, f64>,
    /// Per old task: cosine against the stored snapshot.
    pub cosines: BTreeMap<usize, f64>,
    /// Set when the layer gradient had zero norm (everything -> regime 1).
    pub zero_gradient: bool,
}

impl LayerRegimes {
    pub fn reg23(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.reg2.iter().chain(&self.reg3).copied().collect();
        v.sort_unstable();
        v
    }
}

/// Per-layer regime assignment for one new task.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegimeAssignment {
    pub layers: Vec<LayerRegimes>,
}

impl RegimeAssignment {
    pub fn layer(&self, l: usize) -> &LayerRegimes {
        &self.layers[l]
    }

    /// Demotes a regime-3 task to regime 2 in place; returns whether the
    /// task was actually in regime 3.
    pub fn degenerate(&mut self, layer: usize, task: usize) -> bool {
        let lr = &mut self.layers[layer];
        if let Some(pos) = lr.reg3.iter().position(|&t| t == task) {
            lr.reg3.remove(pos);
            lr.reg2.push(task);
            lr.reg2.sort_unstable();
            true
        } else {
            false
        }
    }
}

/// Splits every old task into regimes 1/2/3 for each of the listed layers.
///
/// Per layer: candidates with projection ratio >= eps1 are ranked by ratio
/// (ties to the smaller task id) and the top `cap` survive into regimes
/// 2/3; survivors with cosine >= eps2 land in regime 3. A zero-norm layer
/// gradient sends every old task to regime 1 and flags the layer.
pub fn detect_regimes(
    init_grads: &LayerGradients,
    memory: &SubspaceMemory,
    thresholds: &CorrelationThresholds,
    projected_layers: &[usize],
) -> RegimeAssignment {
    let num_layers = init_grads.weights.len();
    let mut layers = vec![LayerRegimes::default(); num_layers];
    for &l in projected_layers {
        let g = &init_grads.weights[l];
        let gnorm = flat_norm(g);
        let lr = &mut layers[l];
        let old: Vec<usize> = memory.layer_bases(l).iter().map(|&(t, _)| t).collect();
        if gnorm == 0.0 {
            lr.zero_gradient = true;
            lr.reg1 = old;
            continue;
        }
        let mut candidates: Vec<(usize, f64)> = Vec::new();
        for task in &old {
            let basis = memory.basis(l, *task).expect("listed basis exists");
            let rho = project(g, basis).map(|p| flat_norm(&p) / gnorm).unwrap_or(0.0);
            lr.projection_ratios.insert(*task, rho);
            let cos = memory
                .snapshot_layer(l, *task)
                .map(|s| sparse_cosine(s, g))
                .unwrap_or(0.0);
            lr.cosines.insert(*task, cos);
            if rho >= thresholds.eps1 {
                candidates.push((*task, rho));
            } else {
                lr.reg1.push(*task);
            }
        }
        candidates.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        for (i, (task, _)) in candidates.into_iter().enumerate() {
            if i >= thresholds.cap {
                lr.reg1.push(task);
            } else if lr.cosines[&task] >= thresholds.eps2 {
                lr.reg3.push(task);
            } else {
                lr.reg2.push(task);
            }
        }
        lr.reg1.sort_unstable();
        lr.reg2.sort_unstable();
        lr.reg3.sort_unstable();
    }
    RegimeAssignment { layers }
}

/// Keep-in-regime-3 test: cosine between the stored old-task gradient and
/// the current new-task gradient must stay at or above eps2. Degeneration
/// is one-way; callers never re-promote within a task.
pub fn check_degeneration(snapshot: &SparseLayerGrad, current_grad: &Matrix, eps2: f64) -> bool {
    sparse_cosine(snapshot, current_grad) >= eps2
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{orthonormalize, Basis};
    use crate::memory::{snapshot_gradient, ExtractionConfig, GradientSnapshot};

    fn memory_with(layer: usize, task: usize, basis: Basis, snap_grad: &Matrix) -> SubspaceMemory {
        let mut mem = SubspaceMemory::new(ExtractionConfig::default());
        mem.insert_basis(layer, task, basis);
        let grads = LayerGradients { weights: vec![snap_grad.clone()], biases: vec![vec![]] };
        mem.insert_snapshot(task, snapshot_gradient(&grads, 0.0).unwrap());
        mem
    }

    fn e1_basis() -> Basis {
        Basis::from_orthonormal(Matrix::new(2, 1, vec![1.0, 0.0]))
    }

    fn e2_basis() -> Basis {
        Basis::from_orthonormal(Matrix::new(2, 1, vec![0.0, 1.0]))
    }

    #[test]
    fn orthogonal_basis_goes_regime1() {
        let g = Matrix::new(1, 2, vec![1.0, 0.0]);
        let mem = memory_with(0, 0, e2_basis(), &g);
        let grads = LayerGradients { weights: vec![g], biases: vec![vec![]] };
        let a = detect_regimes(&grads, &mem, &CorrelationThresholds::default(), &[0]);
        assert_eq!(a.layer(0).reg1, vec![0]);
        assert!(a.layer(0).reg3.is_empty());
        assert!(a.layer(0).projection_ratios[&0] < 0.5);
    }

    #[test]
    fn aligned_in_span_goes_regime3() {
        let g = Matrix::new(1, 2, vec![1.0, 0.0]);
        let mem = memory_with(0, 0, e1_basis(), &g);
        let grads = LayerGradients { weights: vec![g], biases: vec![vec![]] };
        let a = detect_regimes(&grads, &mem, &CorrelationThresholds::default(), &[0]);
        assert_eq!(a.layer(0).reg3, vec![0]);
        assert!((a.layer(0).projection_ratios[&0] - 1.0).abs() < 1e-12);
        assert!((a.layer(0).cosines[&0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn anti_aligned_in_span_goes_regime2() {
        let g = Matrix::new(1, 2, vec![1.0, 0.0]);
        let mem = memory_with(0, 0, e1_basis(), &g.scale(-1.0));
        let grads = LayerGradients { weights: vec![g], biases: vec![vec![]] };
        let a = detect_regimes(&grads, &mem, &CorrelationThresholds::default(), &[0]);
        assert_eq!(a.layer(0).reg2, vec![0]);
        assert!((a.layer(0).cosines[&0] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_flags_layer_and_freezes() {
        let g = Matrix::zeros(1, 2);
        let mem = memory_with(0, 0, e1_basis(), &Matrix::new(1, 2, vec![1.0, 0.0]));
        let grads = LayerGradients { weights: vec![g], biases: vec![vec![]] };
        let a = detect_regimes(&grads, &mem, &CorrelationThresholds::default(), &[0]);
        assert!(a.layer(0).zero_gradient);
        assert_eq!(a.layer(0).reg1, vec![0]);
    }

    #[test]
    fn cap_limits_reg23_membership() {
        let g = Matrix::new(1, 2, vec![1.0, 0.0]);
        let mut mem = SubspaceMemory::new(ExtractionConfig::default());
        for task in 0..4 {
            mem.insert_basis(0, task, e1_basis());
            let grads = LayerGradients { weights: vec![g.clone()], biases: vec![vec![]] };
            mem.insert_snapshot(task, snapshot_gradient(&grads, 0.0).unwrap());
        }
        let grads = LayerGradients { weights: vec![g], biases: vec![vec![]] };
        let a = detect_regimes(&grads, &mem, &CorrelationThresholds::default(), &[0]);
        let lr = a.layer(0);
        assert_eq!(lr.reg23().len(), 2);
        // tie on rho -> smaller task ids survive
        assert_eq!(lr.reg3, vec![0, 1]);
        assert_eq!(lr.reg1, vec![2, 3]);
    }

    #[test]
    fn degeneration_checks() {
        let snap = SparseLayerGrad { indices: vec![0], values: vec![1.0], shape: (1, 2) };
        let aligned = Matrix::new(1, 2, vec![2.0, 0.0]);
        let opposed = Matrix::new(1, 2, vec![-2.0, 0.2]);
        assert!(check_degeneration(&snap, &aligned, 0.0));
        assert!(!check_degeneration(&snap, &opposed, 0.0));
        // cosine 0.3 vs eps2 0.5 -> fails
        let tilted = Matrix::new(1, 2, vec![0.3, (1.0_f64 - 0.09).sqrt()]);
        assert!(!check_degeneration(&snap, &tilted, 0.5));
        // monotone in eps2
        assert!(check_degeneration(&snap, &tilted, 0.2));
    }

    #[test]
    fn scale_invariance_of_detection() {
        let g = Matrix::new(1, 2, vec![0.8, 0.6]);
        let mem = memory_with(0, 0, e1_basis(), &g);
        let base = LayerGradients { weights: vec![g.clone()], biases: vec![vec![]] };
        let scaled = LayerGradients { weights: vec![g.scale(17.0)], biases: vec![vec![]] };
        let th = CorrelationThresholds::default();
        let a = detect_regimes(&base, &mem, &th, &[0]);
        let b = detect_regimes(&scaled, &mem, &th, &[0]);
        assert_eq!(a.layer(0).reg1, b.layer(0).reg1);
        assert_eq!(a.layer(0).reg2, b.layer(0).reg2);
        assert_eq!(a.layer(0).reg3, b.layer(0).reg3);
    }

    #[test]
    fn rotation_invariance_of_projection_ratio() {
        // basis spanning a 2-D subspace of R^3, rotated by an orthogonal Q
        let cols = Matrix::new(3, 2, vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let b = orthonormalize(&cols, 1e-10).unwrap();
        let theta: f64 = 0.7;
        let rot = Matrix::new(2, 2, vec![theta.cos(), -theta.sin(), theta.sin(), theta.cos()]);
        let rotated = Basis::from_orthonormal(b.matrix().matmul(&rot));
        let g = Matrix::new(1, 3, vec![0.3, -0.4, 0.5]);
        let r1 = flat_norm(&project(&g, &b).unwrap());
        let r2 = flat_norm(&project(&g, &rotated).unwrap());
        assert!((r1 - r2).abs() < 1e-12);
    }

    #[test]
    fn snapshot_missing_treated_as_zero_cosine() {
        let g = Matrix::new(1, 2, vec![1.0, 0.0]);
        let mut mem = SubspaceMemory::new(ExtractionConfig::default());
        mem.insert_basis(0, 0, e1_basis());
        // no snapshot inserted: cosine defaults to 0, which still passes
        // eps2 = 0 (boundary) into regime 3
        let _ = GradientSnapshot { layers: vec![], sparsity: 0.0 };
        let grads = LayerGradients { weights: vec![g], biases: vec![vec![]] };
        let a = detect_regimes(&grads, &mem, &CorrelationThresholds::default(), &[0]);
        assert_eq!(a.layer(0).reg3, vec![0]);
    }
}
