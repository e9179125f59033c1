//! Dense linear algebra primitives: row-major matrices, thin SVD via
//! one-sided Jacobi rotations, orthonormal bases and subspace projection.
//!
//! Everything here is value-semantic `f64`; matrices stay small (at most a
//! few thousand rows/columns), so no attempt is made at blocking or
//! parallelism.
//!
//! # Examples
//!
//! Thin SVD, reconstruction, and ordering of singular values (mirrored in
//! the guide's "Matrices and Subspaces" chapter):
//!
//! ```
//! use cuber::linalg::{svd, Matrix};
//!
//! let m = Matrix::from_rows(&[
//!     vec![3.0, 1.0, 0.5],
//!     vec![1.0, 2.0, 0.0],
//!     vec![0.0, 1.0, 1.0],
//!     vec![2.0, 0.0, 1.0],
//! ]);
//! let f = svd(&m).unwrap();
//! assert!(f.reconstruct().sub(&m).frob_norm() < 1e-10);
//! assert!(f.singular_values.windows(2).all(|w| w[0] >= w[1]));
//! ```
//!
//! Projection onto a subspace is idempotent and splits a matrix into
//! orthogonal parts:
//!
//! ```
//! use cuber::linalg::{orthonormalize, project, Matrix};
//!
//! let span = Matrix::from_rows(&[vec![1.0, 1.0, 0.0], vec![0.0, 0.0, 2.0]]);
//! let b = orthonormalize(&span.transpose(), 1e-10).unwrap();
//!
//! let g = Matrix::from_rows(&[vec![1.0, 0.0, 3.0]]);
//! let p = project(&g, &b).unwrap();
//! let r = g.sub(&p);
//!
//! // idempotent, and the split is orthogonal
//! assert!(project(&p, &b).unwrap().sub(&p).frob_norm() < 1e-12);
//! let total = g.frob_norm().powi(2);
//! let parts = p.frob_norm().powi(2) + r.frob_norm().powi(2);
//! assert!((total - parts).abs() < 1e-12);
//! ```

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Relative threshold below which a singular value is treated as zero.
pub const RANK_TOL: f64 = 1e-10;

/// Jacobi sweep cap for the SVD.
const SVD_MAX_SWEEPS: usize = 100;

/// Off-diagonal tolerance for Jacobi convergence.
const SVD_OFFDIAG_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

/// Dense 2-D array of `f64` with row-major storage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length must be rows*cols");
        Matrix { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    /// Builds a matrix from row slices; all rows must share a length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Matrix { rows: r, cols: c, data }
    }

    /// Single-row matrix over a flat slice.
    pub fn row_vector(v: &[f64]) -> Self {
        Matrix { rows: 1, cols: v.len(), data: v.to_vec() }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn col(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.set(c, r, self.get(r, c));
            }
        }
        out
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul dimension mismatch");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(r, k);
                if a == 0.0 {
                    continue;
                }
                for c in 0..other.cols {
                    out.data[r * other.cols + c] += a * other.get(k, c);
                }
            }
        }
        out
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Matrix { rows: self.rows, cols: self.cols, data }
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Matrix { rows: self.rows, cols: self.cols, data }
    }

    pub fn scale(&self, s: f64) -> Matrix {
        let data = self.data.iter().map(|a| a * s).collect();
        Matrix { rows: self.rows, cols: self.cols, data }
    }

    pub fn add_assign_scaled(&mut self, other: &Matrix, s: f64) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b * s;
        }
    }

    pub fn frob_norm(&self) -> f64 {
        flat_norm(self)
    }
}

/// Frobenius inner product over two same-shaped matrices.
pub fn flat_inner(a: &Matrix, b: &Matrix) -> Result<f64, LinalgError> {
    if (a.rows, a.cols) != (b.rows, b.cols) {
        return Err(LinalgError::InvalidInput(format!(
            "shape mismatch: {}x{} vs {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum())
}

/// Frobenius norm.
pub fn flat_norm(a: &Matrix) -> f64 {
    a.data.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Orthonormal column set spanning a subspace of an ambient space.
///
/// The zero-column case is a valid (empty) basis.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Basis {
    matrix: Matrix,
}

impl Basis {
    /// Wraps a matrix whose columns are already orthonormal.
    /// Checked in debug builds only; use [`orthonormalize`] for raw columns.
    pub fn from_orthonormal(matrix: Matrix) -> Self {
        debug_assert!(orthonormality_defect(&matrix) <= 1e-8);
        Basis { matrix }
    }

    pub fn empty(ambient_dim: usize) -> Self {
        Basis { matrix: Matrix::zeros(ambient_dim, 0) }
    }

    pub fn ambient_dim(&self) -> usize {
        self.matrix.rows()
    }

    pub fn num_cols(&self) -> usize {
        self.matrix.cols()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.cols() == 0
    }

    /// The projector B B' (ambient x ambient).
    pub fn projector(&self) -> Matrix {
        self.matrix.matmul(&self.matrix.transpose())
    }
}

/// Max-norm of B'B - I; zero for a perfectly orthonormal column set.
pub fn orthonormality_defect(m: &Matrix) -> f64 {
    let gram = m.transpose().matmul(m);
    let mut worst = 0.0_f64;
    for i in 0..gram.rows() {
        for j in 0..gram.cols() {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((gram.get(i, j) - target).abs());
        }
    }
    worst
}

/// Thin SVD: `m = u * diag(singular_values) * v'`.
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub u: Matrix,
    pub singular_values: Vec<f64>,
    pub v: Matrix,
}

impl SvdResult {
    pub fn reconstruct(&self) -> Matrix {
        let k = self.singular_values.len();
        let mut us = self.u.clone();
        for c in 0..k {
            for r in 0..us.rows() {
                let val = us.get(r, c) * self.singular_values[c];
                us.set(r, c, val);
            }
        }
        us.matmul(&self.v.transpose())
    }
}

/// Thin SVD via one-sided Jacobi.
///
/// Singular values come back nonincreasing; the sign convention fixes the
/// largest-magnitude entry of each left singular vector to be positive, so
/// factors are reproducible across platforms.
pub fn svd(m: &Matrix) -> Result<SvdResult, LinalgError> {
    if !m.is_finite() {
        return Err(LinalgError::InvalidInput("non-finite entries".into()));
    }
    if m.rows() >= m.cols() {
        svd_tall(m)
    } else {
        // Work on the transpose and swap the factors back.
        let r = svd_tall(&m.transpose())?;
        Ok(SvdResult { u: r.v, singular_values: r.singular_values, v: r.u })
    }
}

fn svd_tall(m: &Matrix) -> Result<SvdResult, LinalgError> {
    let rows = m.rows();
    let cols = m.cols();
    let mut a = m.clone();
    let mut v = Matrix::identity(cols);

    let mut converged = cols < 2;
    for _ in 0..SVD_MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        for p in 0..cols {
            for q in (p + 1)..cols {
                let mut app = 0.0;
                let mut aqq = 0.0;
                let mut apq = 0.0;
                for r in 0..rows {
                    let x = a.get(r, p);
                    let y = a.get(r, q);
                    app += x * x;
                    aqq += y * y;
                    apq += x * y;
                }
                if apq.abs() <= SVD_OFFDIAG_TOL * (app * aqq).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (aqq - app) / (2.0 * apq);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for r in 0..rows {
                    let x = a.get(r, p);
                    let y = a.get(r, q);
                    a.set(r, p, c * x - s * y);
                    a.set(r, q, s * x + c * y);
                }
                for r in 0..cols {
                    let x = v.get(r, p);
                    let y = v.get(r, q);
                    v.set(r, p, c * x - s * y);
                    v.set(r, q, s * x + c * y);
                }
            }
        }
        if !rotated {
            converged = true;
        }
    }
    if !converged {
        return Err(LinalgError::Numerical(format!(
            "jacobi SVD did not converge within {SVD_MAX_SWEEPS} sweeps"
        )));
    }

    // Column norms are the singular values; sort nonincreasing.
    let mut order: Vec<usize> = (0..cols).collect();
    let norms: Vec<f64> = (0..cols)
        .map(|c| (0..rows).map(|r| a.get(r, c).powi(2)).sum::<f64>().sqrt())
        .collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap().then(i.cmp(&j)));

    let sigma_max = order.first().map(|&i| norms[i]).unwrap_or(0.0);
    let mut u = Matrix::zeros(rows, cols);
    let mut vv = Matrix::zeros(cols, cols);
    let mut singular_values = Vec::with_capacity(cols);
    for (k, &idx) in order.iter().enumerate() {
        let sigma = norms[idx];
        singular_values.push(sigma);
        if sigma > RANK_TOL * sigma_max.max(1e-300) {
            for r in 0..rows {
                u.set(r, k, a.get(r, idx) / sigma);
            }
        } else {
            // Null direction: complete U with a unit vector orthogonal to
            // the columns already filled in.
            let col = orthogonal_completion(&u, k, rows)?;
            for r in 0..rows {
                u.set(r, k, col[r]);
            }
        }
        for r in 0..cols {
            vv.set(r, k, v.get(r, idx));
        }
    }

    // Deterministic signs: largest-magnitude entry of each U column positive.
    for k in 0..cols {
        let mut best = 0usize;
        for r in 1..rows {
            if u.get(r, k).abs() > u.get(best, k).abs() {
                best = r;
            }
        }
        if u.get(best, k) < 0.0 {
            for r in 0..rows {
                let val = -u.get(r, k);
                u.set(r, k, val);
            }
            for r in 0..cols {
                let val = -vv.get(r, k);
                vv.set(r, k, val);
            }
        }
    }

    Ok(SvdResult { u, singular_values, v: vv })
}

/// Unit vector orthogonal to the first `filled` columns of `u`.
fn orthogonal_completion(u: &Matrix, filled: usize, rows: usize) -> Result<Vec<f64>, LinalgError> {
    for seed in 0..rows {
        let mut cand = vec![0.0; rows];
        cand[seed] = 1.0;
        for _ in 0..2 {
            for c in 0..filled {
                let dot: f64 = (0..rows).map(|r| cand[r] * u.get(r, c)).sum();
                for r in 0..rows {
                    cand[r] -= dot * u.get(r, c);
                }
            }
        }
        let norm = cand.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            for x in cand.iter_mut() {
                *x /= norm;
            }
            return Ok(cand);
        }
    }
    Err(LinalgError::Numerical("no orthogonal completion found".into()))
}

/// Projection of every row of `m` onto the subspace: `m * B * B'`.
pub fn project(m: &Matrix, b: &Basis) -> Result<Matrix, LinalgError> {
    if m.cols() != b.ambient_dim() {
        return Err(LinalgError::InvalidInput(format!(
            "matrix has {} cols but basis ambient dim is {}",
            m.cols(),
            b.ambient_dim()
        )));
    }
    if b.is_empty() {
        return Ok(Matrix::zeros(m.rows(), m.cols()));
    }
    let coords = m.matmul(b.matrix());
    Ok(coords.matmul(&b.matrix().transpose()))
}

/// Modified Gram-Schmidt with one re-orthogonalization pass.
///
/// Columns whose residual after projection onto the already-accepted set is
/// shorter than `tol * max(1, original column norm)` are dropped.
pub fn orthonormalize(columns: &Matrix, tol: f64) -> Result<Basis, LinalgError> {
    assert!(tol > 0.0, "tolerance must be positive");
    if !columns.is_finite() {
        return Err(LinalgError::InvalidInput("non-finite entries".into()));
    }
    let rows = columns.rows();
    let mut accepted: Vec<Vec<f64>> = Vec::new();
    for c in 0..columns.cols() {
        let mut v = columns.col(c);
        let orig_norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        for _ in 0..2 {
            for q in &accepted {
                let dot: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
                for (x, y) in v.iter_mut().zip(q) {
                    *x -= dot * y;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < tol * orig_norm.max(1.0) {
            continue;
        }
        for x in v.iter_mut() {
            *x /= norm;
        }
        accepted.push(v);
    }
    let mut m = Matrix::zeros(rows, accepted.len());
    for (k, col) in accepted.iter().enumerate() {
        for r in 0..rows {
            m.set(r, k, col[r]);
        }
    }
    Ok(Basis::from_orthonormal(m))
}

/// Concatenates several bases column-wise and orthonormalizes the result,
/// dropping directions already covered.
pub fn merge_bases(bases: &[&Basis], tol: f64) -> Result<Basis, LinalgError> {
    let dim = match bases.first() {
        Some(b) => b.ambient_dim(),
        None => return Ok(Basis::empty(0)),
    };
    let total: usize = bases.iter().map(|b| b.num_cols()).sum();
    let mut cat = Matrix::zeros(dim, total);
    let mut offset = 0;
    for b in bases {
        assert_eq!(b.ambient_dim(), dim, "ambient dimension mismatch");
        for c in 0..b.num_cols() {
            for r in 0..dim {
                cat.set(r, offset + c, b.matrix().get(r, c));
            }
        }
        offset += b.num_cols();
    }
    orthonormalize(&cat, tol)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn svd_identity() {
        let r = svd(&Matrix::identity(3)).unwrap();
        for s in &r.singular_values {
            assert_close(*s, 1.0, 1e-12);
        }
        assert!(r.reconstruct().sub(&Matrix::identity(3)).frob_norm() < 1e-12);
    }

    #[test]
    fn svd_diagonal_with_zero() {
        let m = Matrix::new(2, 2, vec![3.0, 0.0, 0.0, 0.0]);
        let r = svd(&m).unwrap();
        assert_close(r.singular_values[0], 3.0, 1e-12);
        assert_close(r.singular_values[1], 0.0, 1e-12);
        // thin factors stay orthonormal even on rank-deficient input
        assert!(orthonormality_defect(&r.u) < 1e-10);
        assert!(orthonormality_defect(&r.v) < 1e-10);
    }

    #[test]
    fn svd_reconstruction_random() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let m = Matrix::new(5, 4, (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let r = svd(&m).unwrap();
        let err = r.reconstruct().sub(&m).frob_norm();
        assert!(err <= 1e-8 * m.frob_norm().max(1.0), "reconstruction error {err}");
        assert!(orthonormality_defect(&r.u) < 1e-10);
        assert!(orthonormality_defect(&r.v) < 1e-10);
        // energy identity
        let energy: f64 = r.singular_values.iter().map(|s| s * s).sum();
        assert_close(energy, m.frob_norm().powi(2), 1e-8 * m.frob_norm().powi(2));
    }

    #[test]
    fn svd_wide_matrix() {
        let m = Matrix::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let r = svd(&m).unwrap();
        assert!(r.reconstruct().sub(&m).frob_norm() < 1e-10);
    }

    #[test]
    fn svd_rejects_non_finite() {
        let m = Matrix::new(1, 2, vec![1.0, f64::NAN]);
        assert!(matches!(svd(&m), Err(LinalgError::InvalidInput(_))));
    }

    #[test]
    fn svd_sign_convention_deterministic() {
        let m = Matrix::new(3, 2, vec![-2.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let r = svd(&m).unwrap();
        for c in 0..r.u.cols() {
            let col = r.u.col(c);
            let max = col.iter().cloned().fold(0.0_f64, |m, x| if x.abs() > m.abs() { x } else { m });
            assert!(max > 0.0, "column {c} largest entry not positive");
        }
    }

    #[test]
    fn project_empty_basis_is_zero() {
        let m = Matrix::new(2, 3, vec![1.0; 6]);
        let p = project(&m, &Basis::empty(3)).unwrap();
        assert_eq!(p, Matrix::zeros(2, 3));
    }

    #[test]
    fn project_full_basis_is_identity_map() {
        let m = Matrix::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let b = Basis::from_orthonormal(Matrix::identity(2));
        let p = project(&m, &b).unwrap();
        assert!(p.sub(&m).frob_norm() < 1e-12);
    }

    #[test]
    fn project_hand_example() {
        // M = [1,1], B = (1,0)' -> M B B' = [1,0]
        let m = Matrix::row_vector(&[1.0, 1.0]);
        let b = Basis::from_orthonormal(Matrix::new(2, 1, vec![1.0, 0.0]));
        let p = project(&m, &b).unwrap();
        assert_close(p.get(0, 0), 1.0, 1e-12);
        assert_close(p.get(0, 1), 0.0, 1e-12);
    }

    #[test]
    fn project_dimension_mismatch() {
        let m = Matrix::row_vector(&[1.0, 1.0, 1.0]);
        let b = Basis::from_orthonormal(Matrix::new(2, 1, vec![1.0, 0.0]));
        assert!(project(&m, &b).is_err());
    }

    #[test]
    fn projection_idempotent_and_pythagoras() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let m = Matrix::new(4, 6, (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let cols = Matrix::new(6, 2, (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let b = orthonormalize(&cols, 1e-10).unwrap();
        let p1 = project(&m, &b).unwrap();
        let p2 = project(&p1, &b).unwrap();
        assert!(p2.sub(&p1).frob_norm() < 1e-10);
        let resid = m.sub(&p1);
        let lhs = m.frob_norm().powi(2);
        let rhs = p1.frob_norm().powi(2) + resid.frob_norm().powi(2);
        assert_close(lhs, rhs, 1e-8 * lhs);
    }

    #[test]
    fn orthonormalize_drops_duplicates() {
        let cols = Matrix::new(2, 2, vec![1.0, 1.0, 0.0, 0.0]);
        let b = orthonormalize(&cols, 1e-8).unwrap();
        assert_eq!(b.num_cols(), 1);
    }

    #[test]
    fn orthonormalize_keeps_standard_basis() {
        let b = orthonormalize(&Matrix::identity(2), 1e-8).unwrap();
        assert_eq!(b.num_cols(), 2);
        assert!(b.matrix().sub(&Matrix::identity(2)).frob_norm() < 1e-12);
    }

    #[test]
    fn orthonormalize_matches_qr_span() {
        // columns (1,1)', (1,0)': both survive and span R^2, so the
        // projector must be the identity (same as any full-rank QR).
        let cols = Matrix::new(2, 2, vec![1.0, 1.0, 1.0, 0.0]);
        let b = orthonormalize(&cols, 1e-8).unwrap();
        assert_eq!(b.num_cols(), 2);
        assert!(b.projector().sub(&Matrix::identity(2)).frob_norm() < 1e-8);
    }

    #[test]
    fn flat_inner_examples() {
        let i2 = Matrix::identity(2);
        assert_close(flat_inner(&i2, &i2).unwrap(), 2.0, 1e-15);
        assert_close(flat_norm(&Matrix::zeros(3, 3)), 0.0, 1e-15);
        let a = Matrix::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        assert_close(flat_inner(&a, &i2).unwrap(), 5.0, 1e-15);
        let b = Matrix::zeros(3, 2);
        assert!(flat_inner(&a, &b).is_err());
    }
}
