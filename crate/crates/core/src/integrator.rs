//! Gradient integration by non-negative dual quadratic programming.
//!
//! Given constraint gradients `G` (k x n) and a proposed gradient `g`, the
//! integrated gradient is the closest `g'` to `g` with `G g' >= 0`:
//!
//! ```text
//! primal:  min_{g'} 1/2 ||g' - g||^2      s.t.  G g' >= 0
//! dual:    min_{v}  1/2 v^T (G G^T) v + (G g)^T v   s.t.  v >= 0
//! g' = G^T v + g
//! ```
//!
//! The dual has only `k` variables, so it is solved by cyclic coordinate
//! descent with exact clipped one-dimensional minimization per coordinate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{dot, ParamVector};

/// Guaranteed lower bound on `<row, g'>` after a successful integration.
pub const FEASIBILITY_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "task")]
pub enum ConstraintSource {
    /// Restored gradient of a past task.
    Task(usize),
    /// Gradient recorded before server aggregation.
    PreAggregation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSet {
    rows: Vec<ParamVector>,
    labels: Vec<ConstraintSource>,
}

impl ConstraintSet {
    pub fn new(rows: Vec<ParamVector>, labels: Vec<ConstraintSource>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::dim("constraint set needs at least one row"));
        }
        if rows.len() != labels.len() {
            return Err(Error::dim("one label per constraint row"));
        }
        let n = rows[0].len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::dim("constraint rows differ in length"));
        }
        if rows.iter().any(|r| !r.is_finite()) {
            return Err(Error::dim("constraint rows must be finite"));
        }
        Ok(ConstraintSet { rows, labels })
    }

    pub fn single(row: ParamVector, label: ConstraintSource) -> Result<Self> {
        Self::new(vec![row], vec![label])
    }

    pub fn rows(&self) -> &[ParamVector] {
        &self.rows
    }

    pub fn labels(&self) -> &[ConstraintSource] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows[0].len()
    }

    fn check_dim(&self, g: &[f64]) -> Result<()> {
        if g.len() != self.dim() {
            return Err(Error::dim(format!("gradient has {} entries, constraints have {}", g.len(), self.dim())));
        }
        Ok(())
    }

    /// `G G^T` (k x k, row-major) and `G g` (k).
    fn gram_and_rhs(&self, g: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let k = self.rows.len();
        let mut gram = vec![0.0; k * k];
        for i in 0..k {
            for j in i..k {
                let v = dot(&self.rows[i], &self.rows[j]);
                gram[i * k + j] = v;
                gram[j * k + i] = v;
            }
        }
        let rhs = self.rows.iter().map(|r| dot(r, g)).collect();
        (gram, rhs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Stationarity tolerance on the projected dual gradient.
    pub tol: f64,
    /// Maximum number of full coordinate sweeps.
    pub max_iter: usize,
    /// A row triggers projection when `<row, g> < -eps`.
    pub eps: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig { tol: 1e-10, max_iter: 10_000, eps: 0.0 }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) || self.max_iter == 0 || !(self.eps >= 0.0) {
            return Err(Error::config(format!("invalid solver config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QpSolution {
    /// Dual multipliers, one per constraint row, all `>= 0`.
    pub v: Vec<f64>,
    /// Coordinate sweeps performed.
    pub iterations: usize,
    /// Max violation of the KKT stationarity conditions at `v`.
    pub residual: f64,
    pub converged: bool,
}

/// True when some constraint row makes an obtuse angle with `g`.
pub fn needs_projection(set: &ConstraintSet, g: &[f64], eps: f64) -> Result<bool> {
    set.check_dim(g)?;
    Ok(set.rows.iter().any(|r| dot(r, g) < -eps))
}

/// Dual objective `1/2 v^T (G G^T) v + (G g)^T v`.
pub fn dual_objective(set: &ConstraintSet, g: &[f64], v: &[f64]) -> Result<f64> {
    set.check_dim(g)?;
    let (gram, rhs) = set.gram_and_rhs(g);
    Ok(objective(&gram, &rhs, v))
}

fn objective(gram: &[f64], rhs: &[f64], v: &[f64]) -> f64 {
    let k = v.len();
    let mut quad = 0.0;
    for i in 0..k {
        for j in 0..k {
            quad += v[i] * gram[i * k + j] * v[j];
        }
    }
    0.5 * quad + dot(rhs, v)
}

/// Projected-gradient stationarity residual of the bound-constrained dual.
fn kkt_residual(gram: &[f64], rhs: &[f64], v: &[f64], active: &[bool]) -> f64 {
    let k = v.len();
    let mut worst: f64 = 0.0;
    for j in 0..k {
        if !active[j] {
            continue;
        }
        let grad_j = rhs[j] + (0..k).map(|i| gram[j * k + i] * v[i]).sum::<f64>();
        let violation = if v[j] > 0.0 { grad_j.abs() } else { (-grad_j).max(0.0) };
        worst = worst.max(violation);
    }
    worst
}

/// Minimizer of the dual restricted to the support of `v`, if it is
/// non-negative and the reduced system is well posed.
fn support_minimizer(gram: &[f64], rhs: &[f64], v: &[f64]) -> Option<Vec<f64>> {
    let k = v.len();
    let support: Vec<usize> = (0..k).filter(|&j| v[j] > 0.0).collect();
    let m = support.len();
    if m == 0 {
        return None;
    }
    // Augmented [A | b] for A x = -rhs on the support, Gaussian elimination
    // with partial pivoting.
    let mut a: Vec<Vec<f64>> = support
        .iter()
        .map(|&i| {
            let mut row: Vec<f64> = support.iter().map(|&j| gram[i * k + j]).collect();
            row.push(-rhs[i]);
            row
        })
        .collect();
    let scale = support.iter().map(|&j| gram[j * k + j]).fold(0.0, f64::max);
    for col in 0..m {
        let pivot = (col..m).max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))?;
        if a[pivot][col].abs() <= 1e-13 * scale {
            return None;
        }
        a.swap(col, pivot);
        for r in col + 1..m {
            let f = a[r][col] / a[col][col];
            for c in col..=m {
                a[r][c] -= f * a[col][c];
            }
        }
    }
    let mut x = vec![0.0; m];
    for r in (0..m).rev() {
        let s: f64 = (r + 1..m).map(|c| a[r][c] * x[c]).sum();
        x[r] = (a[r][m] - s) / a[r][r];
    }
    if x.iter().any(|&xi| !(xi >= 0.0) || !xi.is_finite()) {
        return None;
    }
    let mut w = vec![0.0; k];
    for (&j, xi) in support.iter().zip(x) {
        w[j] = xi;
    }
    Some(w)
}

/// Solves the non-negative dual by cyclic coordinate descent.
///
/// Zero-norm rows are vacuous constraints; their multipliers stay at 0.
/// On hitting `max_iter` the last iterate is returned with `converged = false`.
pub fn solve_dual(set: &ConstraintSet, g: &[f64], cfg: &SolverConfig) -> Result<QpSolution> {
    cfg.validate()?;
    set.check_dim(g)?;
    let (gram, rhs) = set.gram_and_rhs(g);
    let k = set.len();
    let active: Vec<bool> = (0..k).map(|j| gram[j * k + j] > 0.0).collect();
    let mut v = vec![0.0; k];

    let mut residual = kkt_residual(&gram, &rhs, &v, &active);
    let mut iterations = 0;
    while residual > cfg.tol && iterations < cfg.max_iter {
        for j in 0..k {
            if !active[j] {
                continue;
            }
            let grad_j = rhs[j] + (0..k).map(|i| gram[j * k + i] * v[i]).sum::<f64>();
            v[j] = (v[j] - grad_j / gram[j * k + j]).max(0.0);
        }
        iterations += 1;
        residual = kkt_residual(&gram, &rhs, &v, &active);
        if residual > cfg.tol {
            // Ill-conditioned Gram matrices make plain sweeps crawl; jump to
            // the exact minimizer on the current support when it is feasible.
            if let Some(w) = support_minimizer(&gram, &rhs, &v) {
                if objective(&gram, &rhs, &w) <= objective(&gram, &rhs, &v) {
                    v = w;
                    residual = kkt_residual(&gram, &rhs, &v, &active);
                }
            }
        }
    }
    Ok(QpSolution { v, iterations, residual, converged: residual <= cfg.tol })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Integration {
    pub gradient: ParamVector,
    /// A projection was attempted because some row was obtuse.
    pub projected: bool,
    /// The solver failed to converge and `g` was used unchanged.
    pub fell_back: bool,
    pub solution: Option<QpSolution>,
}

/// Rotates `g` into `g' = G^T v + g` so that every row of `G` is at an
/// acute (or right) angle with `g'`.
///
/// When no row is obtuse, `g` is returned untouched. A solver that does not
/// converge is a soft failure: `g` is returned unprojected and a warning logged.
pub fn integrate(set: &ConstraintSet, g: &ParamVector, cfg: &SolverConfig) -> Result<Integration> {
    if !needs_projection(set, g, cfg.eps)? {
        return Ok(Integration { gradient: g.clone(), projected: false, fell_back: false, solution: None });
    }
    let solution = solve_dual(set, g, cfg)?;
    if !solution.converged {
        log::warn!(
            "dual QP did not converge after {} sweeps (residual {:.3e}); using unprojected gradient",
            solution.iterations,
            solution.residual
        );
        return Ok(Integration { gradient: g.clone(), projected: true, fell_back: true, solution: Some(solution) });
    }
    let mut out = g.clone();
    for (row, &vj) in set.rows.iter().zip(&solution.v) {
        if vj != 0.0 {
            for (o, r) in out.iter_mut().zip(row.iter()) {
                *o += vj * r;
            }
        }
    }
    Ok(Integration { gradient: out, projected: true, fell_back: false, solution: Some(solution) })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundDiagnostic {
    pub sq_norm: f64,
    pub exceeded: bool,
}

/// Records `||g'||^2` and flags it when above `lambda_bound`.
pub fn check_bounded(g_prime: &[f64], lambda_bound: f64) -> BoundDiagnostic {
    let sq_norm = dot(g_prime, g_prime);
    BoundDiagnostic { sq_norm, exceeded: sq_norm > lambda_bound }
}
