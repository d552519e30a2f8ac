//! Deterministic solver for l1-plus-epigraph programs with self-normalized
//! moment constraints.
//!
//! A [`ConvexProgram`] minimises
//!
//! ```text
//!     sum_{k penalized} |w_k| + lambda * T
//! ```
//!
//! over `(w, T)` subject to constraints that all bound a scalar `T`:
//!
//! * for every residual group `g` with residual `r = r0 - R w` (n rows) and
//!   every weight column `e`:
//!   `|E_n[e r]| <= scale_g * T` (when the group carries moments) and
//!   `sqrt(E_n[e^2 r^2]) <= T`;
//! * free-standing absolute constraints `|a'w + b| <= scale * T`; a zero
//!   scale turns the constraint into the equality `a'w + b = 0`.
//!
//! Per-constraint slacks never appear explicitly: at any optimum each slack
//! equals its natural value `max(rms, |moment| / scale)` and only their
//! maximum `T` enters the objective, so the program is solved in `(w, T)`.

mod barrier;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A block of constraints sharing one affine residual `r = r0 - R w`.
#[derive(Debug, Clone)]
pub struct ResidualGroup {
    offset: DVector<f64>,
    design: DMatrix<f64>,
    columns: Vec<usize>,
    weights: DMatrix<f64>,
    moment_scale: Option<f64>,
    weights_sq: DMatrix<f64>,
    moment_offset: DVector<f64>,
    moment_matrix: DMatrix<f64>,
}

impl ResidualGroup {
    /// `design` holds the columns of `R` that multiply `w[columns[i]]`;
    /// `weights` holds one weight vector `e` per column.
    pub fn new(
        offset: DVector<f64>,
        design: DMatrix<f64>,
        columns: Vec<usize>,
        weights: DMatrix<f64>,
        moment_scale: Option<f64>,
    ) -> Result<Self> {
        let n = offset.len();
        if n == 0 {
            return Err(Error::Dimension("residual group has no rows".into()));
        }
        if design.nrows() != n || weights.nrows() != n {
            return Err(Error::Dimension(format!(
                "residual group rows: offset {n}, design {}, weights {}",
                design.nrows(),
                weights.nrows()
            )));
        }
        if design.ncols() != columns.len() {
            return Err(Error::Dimension(format!(
                "design has {} columns but {} column indices were given",
                design.ncols(),
                columns.len()
            )));
        }
        if let Some(scale) = moment_scale {
            if !(scale > 0.0 && scale.is_finite()) {
                return Err(Error::Parameter(format!(
                    "moment scale must be positive, got {scale}"
                )));
            }
        }
        let all_finite = offset.iter().all(|v| v.is_finite())
            && design.iter().all(|v| v.is_finite())
            && weights.iter().all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::InvalidData("non-finite entry in residual group".into()));
        }
        let inv_n = 1.0 / n as f64;
        let weights_sq = weights.map(|v| v * v);
        let moment_offset = weights.tr_mul(&offset) * inv_n;
        let moment_matrix = weights.tr_mul(&design) * inv_n;
        Ok(Self {
            offset,
            design,
            columns,
            weights,
            moment_scale,
            weights_sq,
            moment_offset,
            moment_matrix,
        })
    }

    pub fn rows(&self) -> usize {
        self.offset.len()
    }

    /// Number of weight columns (each yields one rms and optionally one moment constraint).
    pub fn len(&self) -> usize {
        self.weights.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.ncols() == 0
    }

    pub fn moment_scale(&self) -> Option<f64> {
        self.moment_scale
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    /// `r0 - R w`.
    pub fn residual(&self, w: &[f64]) -> DVector<f64> {
        let mut r = self.offset.clone();
        for (c, &col) in self.columns.iter().enumerate() {
            let wc = w[col];
            if wc != 0.0 {
                r.axpy(-wc, &self.design.column(c), 1.0);
            }
        }
        r
    }

    /// `(E_n[e r], sqrt(E_n[e^2 r^2]))` for every weight column.
    pub fn moments_and_rms(&self, w: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let r = self.residual(w);
        let inv_n = 1.0 / self.rows() as f64;
        let moments = (self.weights.tr_mul(&r) * inv_n).as_slice().to_vec();
        let r2 = r.map(|v| v * v);
        let rms = (self.weights_sq.tr_mul(&r2) * inv_n)
            .iter()
            .map(|v| v.max(0.0).sqrt())
            .collect();
        (moments, rms)
    }
}

/// `|a'w + b| <= scale * T`; `scale == 0` encodes an equality.
#[derive(Debug, Clone, PartialEq)]
pub struct AbsConstraint {
    pub coeffs: Vec<f64>,
    pub offset: f64,
    pub scale: f64,
}

impl AbsConstraint {
    fn value(&self, w: &[f64]) -> f64 {
        self.coeffs.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() + self.offset
    }
}

#[derive(Debug, Clone)]
pub struct ConvexProgram {
    dim: usize,
    penalized: Vec<bool>,
    lambda: f64,
    groups: Vec<ResidualGroup>,
    linear: Vec<AbsConstraint>,
}

impl ConvexProgram {
    /// Program over `dim` coordinates, all penalized, with epigraph weight `lambda`.
    pub fn new(dim: usize, lambda: f64) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::Parameter(format!(
                "epigraph weight must be positive, got {lambda}"
            )));
        }
        Ok(Self {
            dim,
            penalized: vec![true; dim],
            lambda,
            groups: Vec::new(),
            linear: Vec::new(),
        })
    }

    /// Restricts the l1 term to the coordinates in `block`.
    pub fn with_penalized_block(mut self, block: std::ops::Range<usize>) -> Self {
        self.penalized = (0..self.dim).map(|k| block.contains(&k)).collect();
        self
    }

    pub fn add_group(&mut self, group: ResidualGroup) -> Result<()> {
        if let Some(&bad) = group.columns.iter().find(|&&c| c >= self.dim) {
            return Err(Error::Dimension(format!(
                "group references column {bad} but the program has dimension {}",
                self.dim
            )));
        }
        self.groups.push(group);
        Ok(())
    }

    pub fn add_abs_constraint(&mut self, constraint: AbsConstraint) -> Result<()> {
        if constraint.coeffs.len() != self.dim {
            return Err(Error::Dimension(format!(
                "constraint has {} coefficients, program dimension is {}",
                constraint.coeffs.len(),
                self.dim
            )));
        }
        if !(constraint.scale >= 0.0 && constraint.scale.is_finite()) {
            return Err(Error::Parameter(format!(
                "constraint scale must be non-negative, got {}",
                constraint.scale
            )));
        }
        self.linear.push(constraint);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn groups(&self) -> &[ResidualGroup] {
        &self.groups
    }

    pub fn penalized(&self) -> &[bool] {
        &self.penalized
    }

    pub fn num_constraints(&self) -> usize {
        self.groups
            .iter()
            .map(|g| g.len() * if g.moment_scale.is_some() { 2 } else { 1 })
            .sum::<usize>()
            + self.linear.len()
    }

    pub fn l1_norm(&self, w: &[f64]) -> f64 {
        w.iter()
            .zip(&self.penalized)
            .filter(|(_, &p)| p)
            .map(|(v, _)| v.abs())
            .sum()
    }

    /// Smallest feasible epigraph value at `w` (infinite when an equality fails).
    pub fn natural_epigraph(&self, w: &[f64]) -> f64 {
        let mut t: f64 = 0.0;
        for g in &self.groups {
            let (moments, rms) = g.moments_and_rms(w);
            t = rms.iter().fold(t, |acc, &v| acc.max(v));
            if let Some(scale) = g.moment_scale {
                t = moments.iter().fold(t, |acc, &m| acc.max(m.abs() / scale));
            }
        }
        for c in &self.linear {
            if c.scale > 0.0 {
                t = t.max(c.value(w).abs() / c.scale);
            }
        }
        t
    }

    /// Objective `l1 + lambda * T` with `T` at its natural value.
    pub fn reduced_objective(&self, w: &[f64]) -> f64 {
        self.l1_norm(w) + self.lambda * self.natural_epigraph(w)
    }

    /// Per-constraint violation at `(w, T)`; entries `<= 0` are satisfied.
    ///
    /// Order: for each group its moment constraints (if any), then its rms
    /// constraints; then the absolute constraints in insertion order.
    pub fn residuals(&self, w: &[f64], epigraph: f64) -> Result<Vec<f64>> {
        if w.len() != self.dim {
            return Err(Error::Dimension(format!(
                "point has length {}, program dimension is {}",
                w.len(),
                self.dim
            )));
        }
        let mut out = Vec::with_capacity(self.num_constraints());
        for g in &self.groups {
            let (moments, rms) = g.moments_and_rms(w);
            if let Some(scale) = g.moment_scale {
                out.extend(moments.iter().map(|m| m.abs() - scale * epigraph));
            }
            out.extend(rms.iter().map(|v| v - epigraph));
        }
        for c in &self.linear {
            out.push(c.value(w).abs() - c.scale * epigraph);
        }
        Ok(out)
    }

    pub fn max_violation(&self, w: &[f64], epigraph: f64) -> Result<f64> {
        Ok(self
            .residuals(w, epigraph)?
            .into_iter()
            .fold(0.0_f64, f64::max))
    }

    fn equalities(&self) -> impl Iterator<Item = &AbsConstraint> {
        self.linear.iter().filter(|c| c.scale == 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub tol_feas: f64,
    pub tol_obj: f64,
    pub max_iter: usize,
    /// Grow the set of free l1 coordinates from an empty start, checking the
    /// dual condition on the rest after each solve.
    pub working_set: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol_feas: 1e-7,
            tol_obj: 1e-6,
            max_iter: 50_000,
            working_set: true,
        }
    }
}

impl SolverOptions {
    pub fn check(&self) -> Result<()> {
        if !(self.tol_feas > 0.0) || !(self.tol_obj > 0.0) {
            return Err(Error::Parameter(format!(
                "solver tolerances must be positive (tol_feas = {}, tol_obj = {})",
                self.tol_feas, self.tol_obj
            )));
        }
        if self.max_iter == 0 {
            return Err(Error::Parameter("max_iter must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverStatus {
    Converged,
    MaxIter,
    Infeasible,
}

impl std::fmt::Display for SolverStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Converged => "converged",
            Self::MaxIter => "max_iter",
            Self::Infeasible => "infeasible",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverSolution {
    pub w: Vec<f64>,
    /// Natural epigraph value `T` at `w`.
    pub epigraph: f64,
    pub objective: f64,
    pub max_violation: f64,
    /// Upper bound on `objective - optimum` certified by the final barrier
    /// centre (infinite when the run did not converge).
    pub gap_bound: f64,
    pub iterations: usize,
    pub status: SolverStatus,
}

/// Solver summary carried by the estimator fits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverDiagnostics {
    pub status: SolverStatus,
    pub objective: f64,
    pub max_violation: f64,
    pub gap_bound: f64,
    pub iterations: usize,
    /// Set when a fit was accepted without full convergence.
    pub warning: Option<String>,
}

impl From<&SolverSolution> for SolverDiagnostics {
    fn from(sol: &SolverSolution) -> Self {
        Self {
            status: sol.status,
            objective: sol.objective,
            max_violation: sol.max_violation,
            gap_bound: sol.gap_bound,
            iterations: sol.iterations,
            warning: None,
        }
    }
}

impl SolverSolution {
    pub(crate) fn to_error(&self) -> Error {
        Error::Solver {
            status: self.status.to_string(),
            objective: self.objective,
            violation: self.max_violation,
            iterations: self.iterations,
        }
    }
}

/// Solves `program` to the requested tolerances.
///
/// Returns an error only for malformed input; non-convergence and
/// infeasibility are reported through [`SolverSolution::status`].
pub fn solve(program: &ConvexProgram, options: &SolverOptions) -> Result<SolverSolution> {
    options.check()?;
    let dim = program.dim;

    let start = match barrier::equality_start(program) {
        Some(w) => w,
        None => {
            let w = vec![0.0; dim];
            return Ok(finish(program, w, f64::INFINITY, 0, SolverStatus::Infeasible));
        }
    };
    let has_equalities = program.equalities().next().is_some();

    let mut active: Vec<bool> = if options.working_set && !has_equalities {
        program.penalized.iter().map(|&p| !p).collect()
    } else {
        vec![true; dim]
    };

    let mut iterations = 0;
    loop {
        let budget = options.max_iter.saturating_sub(iterations);
        let outcome = barrier::solve_restricted(program, &active, &start, options, budget);
        iterations += outcome.iterations;
        if !outcome.converged {
            return Ok(finish(program, outcome.w, f64::INFINITY, iterations, SolverStatus::MaxIter));
        }
        let inactive: Vec<usize> = (0..dim).filter(|&k| !active[k]).collect();
        if inactive.is_empty() {
            return Ok(finish(program, outcome.w, outcome.gap, iterations, SolverStatus::Converged));
        }

        // Dual check on the fixed-at-zero coordinates.
        let dual = barrier::dual_w_gradient(program, &outcome.w, outcome.epigraph, outcome.t);
        let threshold = 1.0 + options.tol_obj;
        let mut violators: Vec<(usize, f64)> = inactive
            .iter()
            .map(|&k| (k, dual[k].abs()))
            .filter(|&(_, v)| v > threshold)
            .collect();
        if violators.is_empty() {
            return Ok(finish(program, outcome.w, outcome.gap, iterations, SolverStatus::Converged));
        }
        violators.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let free_now = (0..dim).filter(|&k| active[k] && program.penalized[k]).count();
        let grow = free_now.max(10);
        for &(k, _) in violators.iter().take(grow) {
            active[k] = true;
        }
    }
}

fn finish(
    program: &ConvexProgram,
    w: Vec<f64>,
    gap: f64,
    iterations: usize,
    status: SolverStatus,
) -> SolverSolution {
    let epigraph = program.natural_epigraph(&w);
    let objective = program.l1_norm(&w) + program.lambda * epigraph;
    let max_violation = if epigraph.is_finite() {
        program.max_violation(&w, epigraph).unwrap_or(f64::INFINITY)
    } else {
        f64::INFINITY
    };
    SolverSolution {
        w,
        epigraph,
        objective,
        max_violation,
        gap_bound: gap,
        iterations,
        status,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_constraint(dim: usize, k: usize, offset: f64, scale: f64) -> AbsConstraint {
        let mut coeffs = vec![0.0; dim];
        coeffs[k] = 1.0;
        AbsConstraint {
            coeffs,
            offset,
            scale,
        }
    }

    #[test]
    fn pinned_coordinate() {
        let mut prog = ConvexProgram::new(3, 1.0).unwrap();
        prog.add_abs_constraint(unit_constraint(3, 0, -1.0, 0.0)).unwrap();
        let sol = solve(&prog, &SolverOptions::default()).unwrap();
        assert_eq!(sol.status, SolverStatus::Converged);
        assert!((sol.w[0] - 1.0).abs() < 1e-9, "{:?}", sol.w);
        assert!(sol.w[1].abs() < 1e-7 && sol.w[2].abs() < 1e-7);
        assert!((sol.objective - 1.0).abs() < 1e-6);
    }

    #[test]
    fn unconstrained_is_zero() {
        let prog = ConvexProgram::new(4, 2.0).unwrap();
        let sol = solve(&prog, &SolverOptions::default()).unwrap();
        assert_eq!(sol.status, SolverStatus::Converged);
        assert!(sol.w.iter().all(|v| v.abs() < 1e-7));
        assert!(sol.objective.abs() < 1e-6);
    }

    #[test]
    fn inconsistent_equalities_are_infeasible() {
        let mut prog = ConvexProgram::new(2, 1.0).unwrap();
        prog.add_abs_constraint(unit_constraint(2, 0, -1.0, 0.0)).unwrap();
        prog.add_abs_constraint(unit_constraint(2, 0, -2.0, 0.0)).unwrap();
        let sol = solve(&prog, &SolverOptions::default()).unwrap();
        assert_eq!(sol.status, SolverStatus::Infeasible);
    }

    #[test]
    fn residual_reports_excess() {
        let mut prog = ConvexProgram::new(2, 1.0).unwrap();
        prog.add_abs_constraint(unit_constraint(2, 0, 0.0, 1.0)).unwrap();
        prog.add_abs_constraint(unit_constraint(2, 1, 0.0, 1.0)).unwrap();
        let r = prog.residuals(&[1.5, 0.2], 1.0).unwrap();
        assert!((r[0] - 0.5).abs() < 1e-15);
        assert!(r[1] <= 0.0);
        assert!(prog.residuals(&[1.0], 1.0).is_err());
    }

    #[test]
    fn rejects_bad_options() {
        let prog = ConvexProgram::new(1, 1.0).unwrap();
        let opts = SolverOptions {
            tol_feas: 0.0,
            ..SolverOptions::default()
        };
        assert!(solve(&prog, &opts).is_err());
    }
}
