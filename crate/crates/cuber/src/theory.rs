//! Numerical verification of the convergence and transfer guarantees on
//! synthetic two-task instances.
//!
//! Each theorem is checked the same way: build an instance, measure every
//! hypothesis as a signed margin, and only when all margins are nonnegative
//! run the update rules and test the claimed conclusion. Instances that
//! fail a hypothesis are reported as not applicable, never as theorem
//! failures.
//!
//! # Examples
//!
//! A small sweep (mirrored in the guide's "Theory Checks" chapter):
//!
//! ```
//! use cuber::theory::sweep;
//!
//! let s = sweep("thm2_part1", 25, 4, 0);
//! assert_eq!(s.accepted, 25);
//! // every instance passing the hypotheses satisfies the conclusion
//! assert_eq!(s.passed, s.accepted);
//! ```

use serde::Serialize;

use crate::linalg::{orthonormalize, svd, Basis, Matrix};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// A smooth scalar objective over R^d.
#[derive(Debug, Clone)]
pub enum SmoothTask {
    /// L(w) = 1/2 (w - c)' A (w - c), A symmetric PSD.
    Quadratic { a: Matrix, c: Vec<f64> },
    /// L(w) = sum_i (w_i^2 - a_i)^2 / 4, coordinate-wise double well.
    Quartic { a: Vec<f64> },
}

fn vdot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn vnorm(a: &[f64]) -> f64 {
    vdot(a, a).sqrt()
}

fn vsub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

fn matvec(m: &Matrix, v: &[f64]) -> Vec<f64> {
    (0..m.rows()).map(|i| (0..m.cols()).map(|j| m.get(i, j) * v[j]).sum()).collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = vnorm(a);
    let nb = vnorm(b);
    if na == 0.0 || nb == 0.0 {
        // a vanished gradient puts no constraint on the direction of the
        // other; treat the pair as aligned
        return 1.0;
    }
    vdot(a, b) / (na * nb)
}

impl SmoothTask {
    pub fn dim(&self) -> usize {
        match self {
            SmoothTask::Quadratic { c, .. } => c.len(),
            SmoothTask::Quartic { a } => a.len(),
        }
    }

    pub fn loss(&self, w: &[f64]) -> f64 {
        match self {
            SmoothTask::Quadratic { a, c } => {
                let d = vsub(w, c);
                0.5 * vdot(&d, &matvec(a, &d))
            }
            SmoothTask::Quartic { a } => {
                w.iter().zip(a).map(|(&w, &a)| (w * w - a).powi(2) / 4.0).sum()
            }
        }
    }

    pub fn grad(&self, w: &[f64]) -> Vec<f64> {
        match self {
            SmoothTask::Quadratic { a, c } => matvec(a, &vsub(w, c)),
            SmoothTask::Quartic { a } => {
                w.iter().zip(a).map(|(&w, &a)| w * (w * w - a)).collect()
            }
        }
    }

    /// Upper bound on the gradient's Lipschitz constant over the ball
    /// ||w - center|| <= radius.
    pub fn lipschitz_over_ball(&self, center: &[f64], radius: f64) -> f64 {
        match self {
            SmoothTask::Quadratic { a, .. } => {
                // hessian is constant A; lambda_max equals the top singular
                // value since A is symmetric PSD
                svd(a).map(|s| s.singular_values.first().copied().unwrap_or(0.0)).unwrap_or(f64::INFINITY)
            }
            SmoothTask::Quartic { a } => {
                // hessian is diag(3 w_i^2 - a_i); bound each coordinate
                center
                    .iter()
                    .zip(a)
                    .map(|(&w, &a)| {
                        let m = w.abs() + radius;
                        (3.0 * m * m - a).abs().max(a.abs())
                    })
                    .fold(0.0, f64::max)
            }
        }
    }

    /// Upper bound on ||grad|| over the same ball.
    pub fn grad_bound_over_ball(&self, center: &[f64], radius: f64) -> f64 {
        match self {
            SmoothTask::Quadratic { .. } => {
                let g0 = vnorm(&self.grad(center));
                g0 + self.lipschitz_over_ball(center, radius) * radius
            }
            SmoothTask::Quartic { a } => center
                .iter()
                .zip(a)
                .map(|(&w, &a)| {
                    let m = w.abs() + radius;
                    let b = m * (m * m - a).abs().max(m * a.abs());
                    b * b
                })
                .sum::<f64>()
                .sqrt(),
        }
    }
}

/// A two-task verification instance.
#[derive(Debug, Clone)]
pub struct TheoremInstance {
    pub task1: SmoothTask,
    pub task2: SmoothTask,
    /// Stored subspace of the first task.
    pub b1: Basis,
    /// Model learnt on the first task; the starting point of every rule.
    pub w0: Vec<f64>,
    pub gamma: f64,
    pub k_steps: usize,
    pub alpha: f64,
    pub eps1: f64,
    pub eps2: f64,
}

impl TheoremInstance {
    /// Radius of the ball on which the smoothness and gradient bounds are
    /// taken; it contains every bounded trajectory considered here.
    pub fn ball_radius(&self) -> f64 {
        match (&self.task1, &self.task2) {
            (SmoothTask::Quadratic { c: c1, .. }, SmoothTask::Quadratic { c: c2, .. }) => {
                2.0 * (vnorm(&vsub(&self.w0, c1)) + vnorm(&vsub(&self.w0, c2)))
            }
            _ => 1.0,
        }
    }

    /// H such that each task is H/2-smooth over the ball, so the sum is
    /// H-smooth.
    pub fn smoothness(&self) -> f64 {
        let r = self.ball_radius();
        2.0 * self
            .task1
            .lipschitz_over_ball(&self.w0, r)
            .max(self.task2.lipschitz_over_ball(&self.w0, r))
    }

    /// Gradient bound B over the ball, the larger of the two tasks.
    pub fn grad_bound(&self) -> f64 {
        let r = self.ball_radius();
        self.task1
            .grad_bound_over_ball(&self.w0, r)
            .max(self.task2.grad_bound_over_ball(&self.w0, r))
    }

    pub fn f(&self, w: &[f64]) -> f64 {
        self.task1.loss(w) + self.task2.loss(w)
    }

    pub fn f_grad(&self, w: &[f64]) -> Vec<f64> {
        let g1 = self.task1.grad(w);
        let g2 = self.task2.grad(w);
        g1.iter().zip(&g2).map(|(a, b)| a + b).collect()
    }
}

/// Orthogonal-projection update: the new-task gradient is stripped of its
/// component inside the stored subspace before the step.
pub fn rule1_step(w: &[f64], alpha: f64, g2: &[f64], b1: &Basis) -> Vec<f64> {
    if b1.is_empty() {
        return rule2_step(w, alpha, g2);
    }
    let bt_g = matvec(&b1.matrix().transpose(), g2);
    let proj = matvec(b1.matrix(), &bt_g);
    w.iter()
        .zip(g2.iter().zip(&proj))
        .map(|(&w, (&g, &p))| w - alpha * (g - p))
        .collect()
}

/// Vanilla gradient-descent update on the new task.
pub fn rule2_step(w: &[f64], alpha: f64, g2: &[f64]) -> Vec<f64> {
    w.iter().zip(g2).map(|(&w, &g)| w - alpha * g).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct Margin {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    /// lhs - rhs; nonnegative means the hypothesis holds.
    pub margin: f64,
}

impl Margin {
    fn geq(name: &str, lhs: f64, rhs: f64) -> Margin {
        Margin { name: name.to_string(), lhs, rhs, margin: lhs - rhs }
    }
    pub fn holds(&self) -> bool {
        self.margin >= 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Claim {
    Thm1,
    Thm2Part1,
    Thm2Part2,
}

#[derive(Debug, Clone, Serialize)]
pub struct HypothesisCheck {
    pub margins: Vec<Margin>,
    /// For the per-iterate alignment condition: first trajectory index
    /// where it breaks, when it does.
    pub first_violation: Option<usize>,
}

impl HypothesisCheck {
    pub fn all_hold(&self) -> bool {
        self.margins.iter().all(Margin::holds)
    }
    pub fn margin(&self, name: &str) -> Option<&Margin> {
        self.margins.iter().find(|m| m.name == name)
    }
}

/// Projection ratio of a vector onto a subspace.
fn projection_ratio(g: &[f64], b: &Basis) -> f64 {
    let n = vnorm(g);
    if n == 0.0 || b.is_empty() {
        return 0.0;
    }
    let bt_g = matvec(&b.matrix().transpose(), g);
    vnorm(&bt_g) / n
}

/// Measures every hypothesis of the chosen claim as a signed margin.
pub fn check_hypotheses(inst: &TheoremInstance, which: Claim) -> HypothesisCheck {
    let g1 = inst.task1.grad(&inst.w0);
    let g2 = inst.task2.grad(&inst.w0);
    let n1 = vnorm(&g1);
    let n2 = vnorm(&g2);
    let h = inst.smoothness();
    let b = inst.grad_bound();
    let mut margins = Vec::new();
    let mut first_violation = None;

    let eps2_rhs = if n2 == 0.0 { 0.0 } else { (2.0 + inst.gamma * inst.gamma) * n1 / (4.0 * n2) };

    match which {
        Claim::Thm1 => {
            // when the old task is already optimal the interference term
            // vanishes and only the smoothness cap on alpha remains
            let alpha_rhs = if n1 == 0.0 {
                1.0 / h
            } else {
                (1.0 / h).min(inst.gamma * n1 / (h * b * inst.k_steps.max(1) as f64))
            };
            margins.push(Margin::geq("alpha_upper", alpha_rhs, inst.alpha));
            margins.push(Margin::geq("eps2_lower", inst.eps2, eps2_rhs));
            margins.push(Margin::geq("def2_cosine", cosine(&g1, &g2), inst.eps2));
        }
        Claim::Thm2Part1 => {
            let ah = inst.alpha * h;
            let eps1_rhs = ((1.0 + 2.0 * ah) / (2.0 + ah)).sqrt();
            margins.push(Margin::geq("alpha_smooth", 1.0 / h, inst.alpha));
            margins.push(Margin::geq("eps1_lower", inst.eps1, eps1_rhs));
            margins.push(Margin::geq("eps2_lower", inst.eps2, eps2_rhs));
            margins.push(Margin::geq("def1_projection", projection_ratio(&g2, &inst.b1), inst.eps1));
            margins.push(Margin::geq("def2_cosine", cosine(&g1, &g2), inst.eps2));
        }
        Claim::Thm2Part2 => {
            let k = inst.k_steps.max(1) as f64;
            let alpha_rhs = if n1 == 0.0 { 1.0 / h } else { 4.0 * inst.eps2 * n1 / (h * b * k.powf(1.5)) };
            margins.push(Margin::geq("alpha_upper", alpha_rhs, inst.alpha));
            // alignment of the fixed old-task gradient with the new-task
            // gradient along the actual trajectory
            let mut w = inst.w0.clone();
            let mut min_align = f64::INFINITY;
            for i in 0..inst.k_steps {
                let g2_i = inst.task2.grad(&w);
                let c = cosine(&g1, &g2_i);
                if c - inst.eps2 < min_align {
                    min_align = c - inst.eps2;
                }
                if c < inst.eps2 && first_violation.is_none() {
                    first_violation = Some(i);
                }
                w = rule2_step(&w, inst.alpha, &g2_i);
            }
            if inst.k_steps == 0 {
                min_align = 0.0;
            }
            margins.push(Margin {
                name: "alignment_along_trajectory".into(),
                lhs: min_align + inst.eps2,
                rhs: inst.eps2,
                margin: min_align,
            });
        }
    }
    HypothesisCheck { margins, first_violation }
}

#[derive(Debug, Clone, Serialize)]
pub struct VerificationReport {
    pub theorem: String,
    pub hypotheses: Vec<Margin>,
    /// False when a hypothesis fails; no conclusion is asserted then.
    pub applicable: bool,
    pub conclusion_holds: Option<bool>,
    /// Objective values along the trajectory (F for theorem 1, L1 for
    /// theorem 2 part 2).
    pub losses: Vec<f64>,
    pub first_violation: Option<usize>,
    pub detail: String,
}

fn solve_linear(a: &Matrix, b: &[f64]) -> Option<Vec<f64>> {
    let n = b.len();
    let mut m: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| a.get(i, j)).chain([b[i]]).collect())
        .collect();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))?;
        if m[piv][col].abs() < 1e-14 {
            return None;
        }
        m.swap(col, piv);
        for row in 0..n {
            if row == col {
                continue;
            }
            let f = m[row][col] / m[col][col];
            for k in col..=n {
                let v = m[col][k];
                m[row][k] -= f * v;
            }
        }
    }
    Some((0..n).map(|i| m[i][n] / m[i][i]).collect())
}

const DIVERGENCE_CAP: f64 = 1e12;
const CONVEX_TOL: f64 = 1e-3;

/// Convergence of the vanilla rule on the joint objective: to the joint
/// minimizer in the convex case, to a stationarity bound otherwise.
pub fn verify_theorem1(inst: &TheoremInstance) -> VerificationReport {
    let hyps = check_hypotheses(inst, Claim::Thm1);
    let applicable = hyps.all_hold();
    let mut report = VerificationReport {
        theorem: "theorem1".into(),
        hypotheses: hyps.margins,
        applicable,
        conclusion_holds: None,
        losses: Vec::new(),
        first_violation: None,
        detail: String::new(),
    };
    if !applicable {
        report.detail = "hypotheses violated; conclusion not asserted".into();
        return report;
    }

    let mut w = inst.w0.clone();
    let mut min_grad_sq = f64::INFINITY;
    for _ in 0..inst.k_steps {
        report.losses.push(inst.f(&w));
        let gsq = vnorm(&inst.f_grad(&w)).powi(2);
        if gsq < min_grad_sq {
            min_grad_sq = gsq;
        }
        let g2 = inst.task2.grad(&w);
        w = rule2_step(&w, inst.alpha, &g2);
        if !inst.f(&w).is_finite() || inst.f(&w) > DIVERGENCE_CAP {
            report.conclusion_holds = Some(false);
            report.detail = "trajectory diverged".into();
            return report;
        }
    }
    report.losses.push(inst.f(&w));

    match (&inst.task1, &inst.task2) {
        (SmoothTask::Quadratic { a: a1, c: c1 }, SmoothTask::Quadratic { a: a2, c: c2 }) => {
            let sum = a1.add(a2);
            let rhs: Vec<f64> = matvec(a1, c1).iter().zip(&matvec(a2, c2)).map(|(x, y)| x + y).collect();
            match solve_linear(&sum, &rhs) {
                Some(w_star) => {
                    let dist = vnorm(&vsub(&w, &w_star));
                    report.conclusion_holds = Some(dist <= CONVEX_TOL);
                    report.detail = format!("||w_K - w*|| = {dist:.3e}");
                }
                None => {
                    report.conclusion_holds = Some(false);
                    report.detail = "joint hessian singular".into();
                }
            }
        }
        (SmoothTask::Quartic { a: a1 }, SmoothTask::Quartic { a: a2 }) => {
            // per-coordinate joint minimum: w^2 = (a1 + a2)/2 clamped at 0
            let f_star: f64 = a1
                .iter()
                .zip(a2)
                .map(|(&p, &q)| {
                    let x = ((p + q) / 2.0).max(0.0);
                    ((x - p).powi(2) + (x - q).powi(2)) / 4.0
                })
                .sum();
            let g1_0 = vnorm(&inst.task1.grad(&inst.w0));
            let f0 = inst.f(&inst.w0);
            let k = inst.k_steps.max(1) as f64;
            let bound = 2.0 / (inst.alpha * k) * (f0 - f_star)
                + (4.0 + inst.gamma * inst.gamma) / 2.0 * g1_0 * g1_0;
            report.conclusion_holds = Some(min_grad_sq < bound);
            report.detail = format!("min ||grad F||^2 = {min_grad_sq:.3e}, bound = {bound:.3e}");
        }
        _ => {
            report.applicable = false;
            report.detail = "mixed task kinds not supported".into();
        }
    }
    report
}

/// One step of each rule from the same point: keeping the correlated
/// component must not be worse for the joint objective.
pub fn verify_theorem2_part1(inst: &TheoremInstance) -> VerificationReport {
    let hyps = check_hypotheses(inst, Claim::Thm2Part1);
    let applicable = hyps.all_hold();
    let mut report = VerificationReport {
        theorem: "theorem2_part1".into(),
        hypotheses: hyps.margins,
        applicable,
        conclusion_holds: None,
        losses: Vec::new(),
        first_violation: None,
        detail: String::new(),
    };
    if !applicable {
        report.detail = "hypotheses violated; conclusion not asserted".into();
        return report;
    }
    let g2 = inst.task2.grad(&inst.w0);
    let w_r = rule2_step(&inst.w0, inst.alpha, &g2);
    let w_c = rule1_step(&inst.w0, inst.alpha, &g2, &inst.b1);
    let f_r = inst.f(&w_r);
    let f_c = inst.f(&w_c);
    report.losses = vec![inst.f(&inst.w0), f_r, f_c];
    report.conclusion_holds = Some(f_r <= f_c + 1e-12 * f_c.abs().max(1.0));
    report.detail = format!("F(w^r) = {f_r:.6e}, F(w^c) = {f_c:.6e}");
    report
}

/// Running the vanilla rule for k steps must not hurt the old task while
/// the gradients stay aligned.
pub fn verify_theorem2_part2(inst: &TheoremInstance, k: usize) -> VerificationReport {
    let mut gated = inst.clone();
    gated.k_steps = k;
    let hyps = check_hypotheses(&gated, Claim::Thm2Part2);
    let applicable = hyps.all_hold();
    let first_violation = hyps.first_violation;
    let mut report = VerificationReport {
        theorem: "theorem2_part2".into(),
        hypotheses: hyps.margins,
        applicable,
        conclusion_holds: None,
        losses: Vec::new(),
        first_violation,
        detail: String::new(),
    };
    let mut w = inst.w0.clone();
    report.losses.push(inst.task1.loss(&w));
    for _ in 0..k {
        let g2 = inst.task2.grad(&w);
        w = rule2_step(&w, inst.alpha, &g2);
        report.losses.push(inst.task1.loss(&w));
    }
    if !applicable {
        report.detail = match first_violation {
            Some(i) => format!("alignment broke at step {i}; conclusion not asserted"),
            None => "hypotheses violated; conclusion not asserted".into(),
        };
        return report;
    }
    let l0 = report.losses[0];
    let lk = *report.losses.last().unwrap();
    report.conclusion_holds = Some(lk <= l0 + 1e-12);
    report.detail = format!("L1(w_0) = {l0:.6e}, L1(w_k) = {lk:.6e}");
    report
}

// ---------------------------------------------------------------------------
// instance samplers

fn random_orthogonal(dim: usize, rng: &mut ChaCha8Rng) -> Matrix {
    loop {
        let m = Matrix::new(dim, dim, (0..dim * dim).map(|_| rng.gen_range(-1.0..1.0)).collect());
        if let Ok(b) = orthonormalize(&m, 1e-8) {
            if b.num_cols() == dim {
                return b.matrix().clone();
            }
        }
    }
}

fn from_eigs(u: &Matrix, lam: &[f64]) -> Matrix {
    let d = lam.len();
    let mut scaled = u.clone();
    for i in 0..d {
        for j in 0..d {
            scaled.set(i, j, u.get(i, j) * lam[j]);
        }
    }
    scaled.matmul(&u.transpose())
}

fn basis_from_columns(u: &Matrix, cols: &[usize]) -> Basis {
    let d = u.rows();
    let mut m = Matrix::zeros(d, cols.len());
    for (k, &j) in cols.iter().enumerate() {
        for i in 0..d {
            m.set(i, k, u.get(i, j));
        }
    }
    Basis::from_orthonormal(m)
}

/// Shared scaffolding for the quadratic samplers: two quadratics with a
/// common eigenbasis, displaced along the leading shared eigenvector so the
/// two gradients at w0 are exactly collinear.
fn quadratic_pair(
    dim: usize,
    rng: &mut ChaCha8Rng,
    delta: f64,
    shift: f64,
    off_span: f64,
) -> (SmoothTask, SmoothTask, Basis, Vec<f64>, f64, f64) {
    let u = random_orthogonal(dim, rng);
    let mut lam1: Vec<f64> = (0..dim).map(|_| rng.gen_range(0.5..2.0)).collect();
    lam1.sort_by(|a, b| b.total_cmp(a));
    let lam2: Vec<f64> = lam1.iter().map(|&l| l * rng.gen_range(1.0..1.5)).collect();
    let a1 = from_eigs(&u, &lam1);
    let a2 = from_eigs(&u, &lam2);
    let c1: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let dir: Vec<f64> = (0..dim).map(|i| u.get(i, 0)).collect();
    let v: Vec<f64> = (0..dim).map(|i| u.get(i, dim - 1)).collect();
    // old-task subspace: top half of the shared eigenbasis
    let b1 = basis_from_columns(&u, &(0..(dim / 2).max(1)).collect::<Vec<_>>());
    let w0: Vec<f64> = c1.iter().zip(&dir).map(|(&c, &d)| c + delta * d).collect();
    let c2: Vec<f64> = c1
        .iter()
        .zip(dir.iter().zip(&v))
        .map(|(&c, (&d, &vv))| c - shift * d - off_span * vv)
        .collect();
    let lam_max = lam2[0].max(lam1[0]);
    (SmoothTask::Quadratic { a: a1, c: c1 }, SmoothTask::Quadratic { a: a2, c: c2 }, b1, w0, lam_max, lam1[0])
}

/// Convex instance for the convergence claim: both centers and the start
/// point sit within a sub-tolerance neighborhood, so the joint minimizer is
/// provably reached within the pinned tolerance.
pub fn sample_theorem1_convex(dim: usize, rng: &mut ChaCha8Rng) -> TheoremInstance {
    let delta = rng.gen_range(1e-4..2e-4);
    let shift = rng.gen_range(1e-4..2e-4);
    let (task1, task2, b1, w0, _lam_max, _) = quadratic_pair(dim, rng, delta, shift, 0.0);
    let gamma = rng.gen_range(0.2..0.9);
    let k_steps = 20;
    let mut inst = TheoremInstance {
        task1,
        task2,
        b1,
        w0,
        gamma,
        k_steps,
        alpha: 0.0,
        eps1: 0.5,
        eps2: 0.0,
    };
    let g1 = vnorm(&inst.task1.grad(&inst.w0));
    let g2 = vnorm(&inst.task2.grad(&inst.w0));
    let h = inst.smoothness();
    let b = inst.grad_bound();
    inst.alpha = 0.9 * (1.0 / h).min(gamma * g1 / (h * b * k_steps as f64));
    inst.eps2 = (2.0 + gamma * gamma) * g1 / (4.0 * g2);
    inst
}

/// Nonconvex instance: coordinate-wise double wells, the second task's
/// wells placed so its gradient at w0 is an exact positive multiple of the
/// first task's.
pub fn sample_theorem1_nonconvex(dim: usize, rng: &mut ChaCha8Rng) -> TheoremInstance {
    let a1: Vec<f64> = (0..dim).map(|_| rng.gen_range(0.25..1.5)).collect();
    let task1 = SmoothTask::Quartic { a: a1.clone() };
    // settle near a stationary point of the first task, but stop early so
    // the gradient stays nonzero
    let mut w0: Vec<f64> = (0..dim)
        .map(|_| rng.gen_range(0.5..1.5) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 })
        .collect();
    for _ in 0..12 {
        let g = task1.grad(&w0);
        for (w, g) in w0.iter_mut().zip(&g) {
            *w -= 0.05 * g;
        }
    }
    let kappa = rng.gen_range(0.5..2.0);
    let a2: Vec<f64> = a1.iter().zip(&w0).map(|(&a, &w)| a - kappa * (w * w - a)).collect();
    let task2 = SmoothTask::Quartic { a: a2 };
    let gamma = rng.gen_range(0.2..0.9);
    let k_steps = 30;
    let mut inst = TheoremInstance {
        task1,
        task2,
        b1: Basis::empty(dim),
        w0,
        gamma,
        k_steps,
        alpha: 0.0,
        eps1: 0.5,
        eps2: 0.0,
    };
    let g1 = vnorm(&inst.task1.grad(&inst.w0));
    let g2 = vnorm(&inst.task2.grad(&inst.w0));
    let h = inst.smoothness();
    let b = inst.grad_bound();
    inst.alpha = 0.9 * (1.0 / h).min(gamma * g1 / (h * b * k_steps as f64));
    inst.eps2 = if g2 == 0.0 { 0.0 } else { (2.0 + gamma * gamma) * g1 / (4.0 * g2) };
    inst
}

/// Instance for the single-step comparison: new-task gradient almost fully
/// inside the stored subspace and positively aligned with the old one.
pub fn sample_theorem2_part1(dim: usize, rng: &mut ChaCha8Rng) -> TheoremInstance {
    let delta = rng.gen_range(0.1..0.5);
    let shift = rng.gen_range(0.5..1.5) * delta;
    let off = rng.gen_range(0.0..0.05) * delta;
    let (task1, task2, b1, w0, _, _) = quadratic_pair(dim, rng, delta, shift, off);
    let gamma = rng.gen_range(0.2..0.9);
    let mut inst = TheoremInstance {
        task1,
        task2,
        b1,
        w0,
        gamma,
        k_steps: 1,
        alpha: 0.0,
        eps1: 0.0,
        eps2: 0.0,
    };
    let h = inst.smoothness();
    let c = rng.gen_range(0.02..0.3);
    inst.alpha = c / h;
    let ah = inst.alpha * h;
    inst.eps1 = ((1.0 + 2.0 * ah) / (2.0 + ah)).sqrt();
    let g1 = vnorm(&inst.task1.grad(&inst.w0));
    let g2 = vnorm(&inst.task2.grad(&inst.w0));
    inst.eps2 = if g2 == 0.0 { 0.0 } else { (2.0 + gamma * gamma) * g1 / (4.0 * g2) };
    inst
}

/// Instance for the k-step backward-transfer claim. With `conflict` the
/// second task's center is pushed off the shared leading eigenvector, so
/// the trajectory rotates away and the alignment condition eventually
/// breaks; the verifier then logs the first-violation step instead of
/// asserting the conclusion.
pub fn sample_theorem2_part2(dim: usize, rng: &mut ChaCha8Rng, conflict: bool) -> (TheoremInstance, usize) {
    let delta = rng.gen_range(0.2..0.5);
    let shift = rng.gen_range(0.2..0.9) * delta;
    let off = if conflict { rng.gen_range(1.0..2.0) * delta } else { 0.0 };
    let (task1, task2, b1, w0, _, _) = quadratic_pair(dim, rng, delta, shift, off);
    let gamma = rng.gen_range(0.2..0.9);
    let k = rng.gen_range(5..25usize);
    let mut inst = TheoremInstance {
        task1,
        task2,
        b1,
        w0,
        gamma,
        k_steps: k,
        alpha: 0.0,
        eps1: 0.5,
        eps2: if conflict { 0.9 } else { 0.5 },
    };
    let g1 = vnorm(&inst.task1.grad(&inst.w0));
    let h = inst.smoothness();
    let b = inst.grad_bound();
    let cap = 4.0 * inst.eps2 * g1 / (h * b * (k as f64).powf(1.5));
    inst.alpha = if conflict {
        // larger steps reach the conflicting region inside k iterations
        (0.5 / h).min(cap * 50.0)
    } else {
        0.9 * cap.min(1.0 / h)
    };
    (inst, k)
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepSummary {
    pub theorem: String,
    pub tried: usize,
    pub accepted: usize,
    pub passed: usize,
    pub acceptance_rate: f64,
    pub first_violations: Vec<usize>,
}

impl SweepSummary {
    pub fn all_accepted_passed(&self) -> bool {
        self.accepted > 0 && self.passed == self.accepted
    }
}

/// Samples instances until `target` of them satisfy every hypothesis, runs
/// the verifier on those, and reports acceptance and pass counts.
pub fn sweep(theorem: &str, target: usize, dim: usize, seed: u64) -> SweepSummary {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut summary = SweepSummary {
        theorem: theorem.to_string(),
        tried: 0,
        accepted: 0,
        passed: 0,
        acceptance_rate: 0.0,
        first_violations: Vec::new(),
    };
    let cap = target.saturating_mul(50).max(100);
    while summary.accepted < target && summary.tried < cap {
        summary.tried += 1;
        let report = match theorem {
            "thm1_convex" => verify_theorem1(&sample_theorem1_convex(dim, &mut rng)),
            "thm1_nonconvex" => verify_theorem1(&sample_theorem1_nonconvex(dim, &mut rng)),
            "thm2_part1" => verify_theorem2_part1(&sample_theorem2_part1(dim, &mut rng)),
            "thm2_part2" => {
                let (inst, k) = sample_theorem2_part2(dim, &mut rng, false);
                verify_theorem2_part2(&inst, k)
            }
            "thm2_part2_conflict" => {
                let (inst, k) = sample_theorem2_part2(dim, &mut rng, true);
                let r = verify_theorem2_part2(&inst, k);
                if let Some(v) = r.first_violation {
                    summary.first_violations.push(v);
                }
                r
            }
            other => panic!("unknown sweep '{other}'"),
        };
        if report.applicable {
            summary.accepted += 1;
            if report.conclusion_holds == Some(true) {
                summary.passed += 1;
            }
        }
    }
    summary.acceptance_rate = summary.accepted as f64 / summary.tried.max(1) as f64;
    summary
}
