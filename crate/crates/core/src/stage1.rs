//! Pivotal self-normalized estimator of the full coefficient vector.
//!
//! ```text
//!     min ||beta||_1 + lambda_t ||t||_inf
//!     s.t. |E_n[(y - x'beta) z_l]| <= tau t_l,
//!          sqrt(E_n[(y - x'beta)^2 z_l^2]) <= t_l,   l = 1..K
//! ```

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, PenaltyConfig};
use crate::error::{Error, Result};
use crate::solver::{self, ConvexProgram, ResidualGroup, SolverDiagnostics, SolverOptions, SolverStatus};
use crate::stats::normal_quantile;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Fit {
    pub beta_hat: Vec<f64>,
    /// Natural slacks `max(rms_l, |moment_l| / tau)`.
    pub t_hat: Vec<f64>,
    pub penalties: PenaltyConfig,
    pub h1n: f64,
    pub diagnostics: SolverDiagnostics,
}

impl Stage1Fit {
    pub fn objective(&self) -> f64 {
        stage1_objective(&self.beta_hat, &self.t_hat, self.penalties.lambda_t)
    }
}

/// `||beta||_1 + lambda_t * ||t||_inf`.
pub fn stage1_objective(beta: &[f64], t: &[f64], lambda_t: f64) -> f64 {
    beta.iter().map(|b| b.abs()).sum::<f64>() + lambda_t * t.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
}

/// Largest entry of `(Z∘Z)'(A∘A) / n` over all column pairs.
///
/// For a fixed weight column the matrix `E_n[z_k^2 a a']` is positive
/// semidefinite, so its max-norm is attained on the diagonal.
pub(crate) fn max_weighted_square(z: &DMatrix<f64>, a: &DMatrix<f64>) -> f64 {
    let n = z.nrows() as f64;
    let z2 = z.map(|v| v * v);
    let a2 = a.map(|v| v * v);
    let m = z2.tr_mul(&a2) / n;
    m.iter().fold(0.0_f64, |acc, &v| acc.max(v))
}

/// `max_k || E_n[z_k^2 x x'] ||_max`.
pub fn compute_h1n(dataset: &Dataset) -> f64 {
    max_weighted_square(dataset.z(), dataset.x())
}

pub(crate) fn check_alpha(n: usize, alpha: f64) -> Result<()> {
    let lower = 1.0 / n as f64;
    if !(alpha > lower && alpha < 1.0) {
        return Err(Error::Parameter(format!(
            "alpha must lie in (1/n, 1) = ({lower}, 1), got {alpha}"
        )));
    }
    Ok(())
}

pub(crate) fn check_h(h: f64, name: &str) -> Result<()> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Parameter(format!(
            "{name} must be positive for the default penalty, got {h}"
        )));
    }
    Ok(())
}

/// `lambda_t = 1 / (2 H1n)`, `tau = Phi^{-1}(1 - alpha / (2p)) / sqrt(n)`.
pub fn default_penalties_stage1(n: usize, p: usize, alpha: f64, h1n: f64) -> Result<PenaltyConfig> {
    check_alpha(n, alpha)?;
    check_h(h1n, "H1n")?;
    let tau = normal_quantile(1.0 - alpha / (2.0 * p as f64)) / (n as f64).sqrt();
    PenaltyConfig::new(1.0 / (2.0 * h1n), tau, 1.0, alpha)
}

fn program(dataset: &Dataset, penalties: &PenaltyConfig) -> Result<ConvexProgram> {
    let p = dataset.p();
    let mut prog = ConvexProgram::new(p, penalties.lambda_t)?;
    prog.add_group(ResidualGroup::new(
        dataset.y().clone(),
        dataset.x().clone(),
        (0..p).collect(),
        dataset.z().clone(),
        Some(penalties.tau),
    )?)?;
    Ok(prog)
}

/// Natural slacks `max(rms_l, |m_l| / scale)`.
pub(crate) fn natural_slacks(moments: &[f64], rms: &[f64], scale: f64) -> Vec<f64> {
    moments
        .iter()
        .zip(rms)
        .map(|(m, r)| r.max(m.abs() / scale))
        .collect()
}

pub fn fit_beta(dataset: &Dataset, penalties: &PenaltyConfig) -> Result<Stage1Fit> {
    fit_beta_with(dataset, penalties, &SolverOptions::default())
}

pub fn fit_beta_with(
    dataset: &Dataset,
    penalties: &PenaltyConfig,
    options: &SolverOptions,
) -> Result<Stage1Fit> {
    dataset.ensure_valid()?;
    penalties.check()?;
    let prog = program(dataset, penalties)?;
    let sol = solver::solve(&prog, options)?;
    if sol.status != SolverStatus::Converged {
        return Err(sol.to_error());
    }
    let (moments, rms) = prog.groups()[0].moments_and_rms(&sol.w);
    Ok(Stage1Fit {
        t_hat: natural_slacks(&moments, &rms, penalties.tau),
        beta_hat: sol.w.clone(),
        penalties: *penalties,
        h1n: compute_h1n(dataset),
        diagnostics: SolverDiagnostics::from(&sol),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityReport {
    pub feasible: bool,
    /// `t_l(beta) = sqrt(E_n[z_l^2 (y - x'beta)^2])`.
    pub natural_slack: Vec<f64>,
    /// `|E_n[(y - x'beta) z_l]| - tau * t_l(beta)`; feasible when all are `<= 0`.
    pub margins: Vec<f64>,
    pub max_margin: f64,
}

/// Whether `beta` with its natural slack satisfies the moment constraints.
pub fn check_feasibility(
    dataset: &Dataset,
    beta: &[f64],
    penalties: &PenaltyConfig,
) -> Result<FeasibilityReport> {
    if beta.len() != dataset.p() {
        return Err(Error::Dimension(format!(
            "beta has length {}, dataset has p = {}",
            beta.len(),
            dataset.p()
        )));
    }
    let n = dataset.n() as f64;
    let mut r = dataset.y().clone();
    for (k, &b) in beta.iter().enumerate() {
        if b != 0.0 {
            r.axpy(-b, &dataset.x().column(k), 1.0);
        }
    }
    let z = dataset.z();
    let moments = z.tr_mul(&r) / n;
    let r2 = r.map(|v| v * v);
    let slack: Vec<f64> = (z.map(|v| v * v).tr_mul(&r2) / n).iter().map(|v| v.sqrt()).collect();
    let margins: Vec<f64> = moments
        .iter()
        .zip(&slack)
        .map(|(m, t)| m.abs() - penalties.tau * t)
        .collect();
    let max_margin = margins.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(FeasibilityReport {
        feasible: margins.iter().all(|&m| m <= 0.0),
        natural_slack: slack,
        margins,
        max_margin,
    })
}
