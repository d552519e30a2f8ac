//! Orthogonal instrument for one target coefficient.
//!
//! For target `j` the program chooses `(mu, theta)` so that the constructed
//! instrument `z'mu` is nearly uncorrelated with the other regressors while
//! `v = x_j - Z mu - X_{-j} theta` is nearly uncorrelated with both `z` and
//! `x_{-j}`:
//!
//! ```text
//!     min ||mu||_1 + ||theta||_1 + lambda_t ||t||_inf
//!     s.t. |E_n[v z_l]|        <= c tau t^z_l,    sqrt(E_n[v^2 z_l^2])        <= t^z_l
//!          |E_n[v x_l]|        <= c tau t^x_l,    sqrt(E_n[v^2 x_l^2])        <= t^x_l
//!          |E_n[x_l z'mu]|     <= c tau t^xz_l,   sqrt(E_n[x_l^2 (z'mu)^2])   <= t^xz_l
//! ```
//! with `l` ranging over instruments and over regressors other than `j`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, PenaltyConfig};
use crate::error::{Error, Result};
use crate::solver::{self, ConvexProgram, ResidualGroup, SolverDiagnostics, SolverOptions, SolverStatus};
use crate::stage1::{check_alpha, check_h, max_weighted_square, natural_slacks};
use crate::stats::normal_quantile;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrthogonalInstrumentFit {
    /// Zero-based target index.
    pub j: usize,
    pub mu_hat: Vec<f64>,
    /// Coefficients on `x_{-j}` in column order with `j` removed.
    pub theta_hat: Vec<f64>,
    pub t_hat_z: Vec<f64>,
    pub t_hat_x: Vec<f64>,
    pub t_hat_xz: Vec<f64>,
    pub penalties: PenaltyConfig,
    pub h2n: f64,
    pub diagnostics: SolverDiagnostics,
}

impl OrthogonalInstrumentFit {
    pub fn objective(&self) -> f64 {
        let t_max = self
            .t_hat_z
            .iter()
            .chain(&self.t_hat_x)
            .chain(&self.t_hat_xz)
            .fold(0.0_f64, |m, v| m.max(*v));
        self.mu_hat.iter().chain(&self.theta_hat).map(|v| v.abs()).sum::<f64>()
            + self.penalties.lambda_t * t_max
    }
}

/// `max(H^x, H^xz, H^z)` with `H^x = max_k ||E_n[z_k^2 x x']||_max`,
/// `H^xz = max_l ||E_n[x_l^2 z z']||_max` and `H^z = max_k ||E_n[z_k^2 z z']||_max`.
pub fn compute_h2n(dataset: &Dataset) -> f64 {
    let (x, z) = (dataset.x(), dataset.z());
    max_weighted_square(z, x)
        .max(max_weighted_square(x, z))
        .max(max_weighted_square(z, z))
}

/// `lambda_t = 1 / (2 H2n)`, `tau = 1.1 Phi^{-1}(1 - alpha / (2 |S| (K + p))) / sqrt(n)`.
pub fn default_penalties_stage2(
    n: usize,
    p: usize,
    k: usize,
    s_size: usize,
    alpha: f64,
    h2n: f64,
    c: f64,
) -> Result<PenaltyConfig> {
    check_alpha(n, alpha)?;
    check_h(h2n, "H2n")?;
    if s_size == 0 {
        return Err(Error::Parameter("target set must be nonempty".into()));
    }
    let level = alpha / (2.0 * s_size as f64 * (k + p) as f64);
    let tau = 1.1 * normal_quantile(1.0 - level) / (n as f64).sqrt();
    PenaltyConfig::new(1.0 / (2.0 * h2n), tau, c, alpha)
}

/// Default stage-2 multiplier: 1.1, or 1 for i.i.d. data.
pub fn default_c(iid: bool) -> f64 {
    if iid {
        1.0
    } else {
        1.1
    }
}

fn without_column(x: &DMatrix<f64>, j: usize) -> DMatrix<f64> {
    x.clone().remove_column(j)
}

fn program(dataset: &Dataset, j: usize, penalties: &PenaltyConfig) -> Result<ConvexProgram> {
    let (p, k) = (dataset.p(), dataset.k());
    let dim = k + p - 1;
    let scale = penalties.c * penalties.tau;
    let x_rest = without_column(dataset.x(), j);
    let x_j: DVector<f64> = dataset.x().column(j).into_owned();

    let mut prog = ConvexProgram::new(dim, penalties.lambda_t)?;
    let design = DMatrix::from_fn(dataset.n(), dim, |i, c| {
        if c < k {
            dataset.z()[(i, c)]
        } else {
            x_rest[(i, c - k)]
        }
    });
    prog.add_group(ResidualGroup::new(
        x_j,
        design.clone(),
        (0..dim).collect(),
        design,
        Some(scale),
    )?)?;
    if p > 1 {
        prog.add_group(ResidualGroup::new(
            DVector::zeros(dataset.n()),
            -dataset.z(),
            (0..k).collect(),
            x_rest,
            Some(scale),
        )?)?;
    }
    Ok(prog)
}

fn check_index(dataset: &Dataset, j: usize) -> Result<()> {
    if j >= dataset.p() {
        return Err(Error::Parameter(format!(
            "target index {j} out of range for p = {}",
            dataset.p()
        )));
    }
    Ok(())
}

pub fn fit_instrument(dataset: &Dataset, j: usize, penalties: &PenaltyConfig) -> Result<OrthogonalInstrumentFit> {
    fit_instrument_with(dataset, j, penalties, &SolverOptions::default())
}

pub fn fit_instrument_with(
    dataset: &Dataset,
    j: usize,
    penalties: &PenaltyConfig,
    options: &SolverOptions,
) -> Result<OrthogonalInstrumentFit> {
    dataset.ensure_valid()?;
    check_index(dataset, j)?;
    penalties.check()?;
    let k = dataset.k();
    let prog = program(dataset, j, penalties)?;
    let sol = solver::solve(&prog, options)?;
    let mut diagnostics = SolverDiagnostics::from(&sol);
    match sol.status {
        SolverStatus::Converged => {}
        SolverStatus::MaxIter if sol.max_violation <= 10.0 * options.tol_feas => {
            diagnostics.warning = Some(format!(
                "accepted after {} iterations without certified optimality",
                sol.iterations
            ));
        }
        _ => return Err(sol.to_error()),
    }

    let scale = penalties.c * penalties.tau;
    let (m_v, r_v) = prog.groups()[0].moments_and_rms(&sol.w);
    let slack_v = natural_slacks(&m_v, &r_v, scale);
    let t_hat_xz = match prog.groups().get(1) {
        Some(g) => {
            let (m, r) = g.moments_and_rms(&sol.w);
            natural_slacks(&m, &r, scale)
        }
        None => Vec::new(),
    };
    Ok(OrthogonalInstrumentFit {
        j,
        mu_hat: sol.w[..k].to_vec(),
        theta_hat: sol.w[k..].to_vec(),
        t_hat_z: slack_v[..k].to_vec(),
        t_hat_x: slack_v[k..].to_vec(),
        t_hat_xz,
        penalties: *penalties,
        h2n: compute_h2n(dataset),
        diagnostics,
    })
}

/// Constraint margins of one family; entries `<= 0` are satisfied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyMargins {
    /// `|moment_l| - c tau t_l`.
    pub moment: Vec<f64>,
    /// `rms_l - t_l`.
    pub rms: Vec<f64>,
}

impl FamilyMargins {
    fn new(moments: &[f64], rms: &[f64], slack: &[f64], scale: f64) -> Self {
        Self {
            moment: moments.iter().zip(slack).map(|(m, t)| m.abs() - scale * t).collect(),
            rms: rms.iter().zip(slack).map(|(r, t)| r - t).collect(),
        }
    }

    pub fn max(&self) -> f64 {
        self.moment
            .iter()
            .chain(&self.rms)
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrthogonalityReport {
    /// `max_{l != j} |E_n[x_l z'mu]|` (0 when p = 1).
    pub max_orthogonality: f64,
    /// `E_n[x_j z'mu]`.
    pub omega_hat: f64,
    pub z: FamilyMargins,
    pub x: FamilyMargins,
    pub xz: FamilyMargins,
}

impl OrthogonalityReport {
    pub fn max_margin(&self) -> f64 {
        self.z.max().max(self.x.max()).max(self.xz.max())
    }
}

pub fn orthogonality_residuals(dataset: &Dataset, fit: &OrthogonalInstrumentFit) -> Result<OrthogonalityReport> {
    check_index(dataset, fit.j)?;
    let (p, k) = (dataset.p(), dataset.k());
    if fit.mu_hat.len() != k || fit.theta_hat.len() != p - 1 {
        return Err(Error::Dimension(format!(
            "fit has |mu| = {}, |theta| = {}; dataset has K = {k}, p = {p}",
            fit.mu_hat.len(),
            fit.theta_hat.len()
        )));
    }
    let n = dataset.n() as f64;
    let zmu = dataset.z() * DVector::from_column_slice(&fit.mu_hat);
    let x_rest = without_column(dataset.x(), fit.j);
    let v = dataset.x().column(fit.j) - &zmu - &x_rest * DVector::from_column_slice(&fit.theta_hat);

    let moments_rms = |weights: &DMatrix<f64>, r: &DVector<f64>| -> (Vec<f64>, Vec<f64>) {
        let m = (weights.tr_mul(r) / n).as_slice().to_vec();
        let r2 = r.map(|a| a * a);
        let rms = (weights.map(|a| a * a).tr_mul(&r2) / n).iter().map(|a| a.sqrt()).collect();
        (m, rms)
    };
    let scale = fit.penalties.c * fit.penalties.tau;
    let (mz, rz) = moments_rms(dataset.z(), &v);
    let (mx, rx) = moments_rms(&x_rest, &v);
    let (mxz, rxz) = moments_rms(&x_rest, &zmu);
    let omega_hat = dataset.x().column(fit.j).dot(&zmu) / n;
    Ok(OrthogonalityReport {
        max_orthogonality: mxz.iter().fold(0.0_f64, |m, v| m.max(v.abs())),
        omega_hat,
        z: FamilyMargins::new(&mz, &rz, &fit.t_hat_z, scale),
        x: FamilyMargins::new(&mx, &rx, &fit.t_hat_x, scale),
        xz: FamilyMargins::new(&mxz, &rxz, &fit.t_hat_xz, scale),
    })
}
