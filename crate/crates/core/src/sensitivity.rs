//! l_q sensitivity coefficients of `Psi = Z'X / n`.
//!
//! ```text
//!     kappa_q(s, u) = min_{|J| <= s} min { ||Psi theta||_inf : theta in C_J(u), ||theta||_q = 1 }
//!     C_J(u) = { theta : ||theta_{J^c}||_1 <= u ||theta_J||_1 }
//! ```
//!
//! Exact values come from enumerating supports `J` and sign orthants; the
//! lower bound uses sparse singular values of `Psi`.

use std::collections::BTreeMap;

use minilp::{ComparisonOp, LinearExpr, OptimizationDirection, Problem, Variable};
use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const MAX_EXACT_P: usize = 12;
pub const MAX_EXACT_S: usize = 3;
pub const MAX_SUBMATRICES: f64 = 1e6;

/// Random starts (beyond the all-ones and coordinate starts) of the l2 search.
const L2_RANDOM_STARTS: usize = 4;
const L2_ASCENT_STEPS: usize = 50;

fn check_q(q: u32) -> Result<()> {
    if q == 1 || q == 2 {
        Ok(())
    } else {
        Err(Error::Parameter(format!("q must be 1 or 2, got {q}")))
    }
}

fn check_su(s: usize, u: f64) -> Result<()> {
    if s == 0 {
        return Err(Error::Parameter("sparsity s must be at least 1".into()));
    }
    if !(u > 0.0 && u.is_finite()) {
        return Err(Error::Parameter(format!("cone constant u must be positive, got {u}")));
    }
    Ok(())
}

/// All subsets of `0..n` with exactly `k` elements, in lexicographic order.
pub fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    if k > n {
        return out;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        out.push(idx.clone());
        let mut i = k;
        loop {
            if i == 0 {
                return out;
            }
            i -= 1;
            if idx[i] != i + n - k {
                break;
            }
        }
        idx[i] += 1;
        for t in i + 1..k {
            idx[t] = idx[t - 1] + 1;
        }
    }
}

pub fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Orthant-and-cone polytope for one support `J` and sign pattern.
struct Orthant<'a> {
    psi: &'a DMatrix<f64>,
    signs: &'a [f64],
    /// `None` drops the cone constraint.
    in_support: Option<Vec<bool>>,
    u: f64,
}

impl Orthant<'_> {
    fn base(&self, direction: OptimizationDirection, objective: &[f64]) -> (Problem, Vec<Variable>) {
        let p = self.psi.ncols();
        let mut lp = Problem::new(direction);
        let phi: Vec<Variable> = (0..p).map(|i| lp.add_var(objective[i], (0.0, f64::INFINITY))).collect();
        if let Some(support) = &self.in_support {
            let mut cone = LinearExpr::empty();
            for i in 0..p {
                cone.add(phi[i], if support[i] { -self.u } else { 1.0 });
            }
            lp.add_constraint(cone, ComparisonOp::Le, 0.0);
        }
        (lp, phi)
    }

    fn signed_row(&self, k: usize, phi: &[Variable]) -> Vec<(Variable, f64)> {
        (0..phi.len())
            .filter(|&i| self.psi[(k, i)] != 0.0)
            .map(|i| (phi[i], self.psi[(k, i)] * self.signs[i]))
            .collect()
    }

    /// `min ||Psi_sigma phi||_inf` over the cone slice `sum(phi) = 1`, with the minimiser.
    fn l1_value(&self) -> Result<(f64, Vec<f64>)> {
        let p = self.psi.ncols();
        let (mut lp, phi) = self.base(OptimizationDirection::Minimize, &vec![0.0; p]);
        let t = lp.add_var(1.0, (0.0, f64::INFINITY));
        for k in 0..self.psi.nrows() {
            let mut upper = self.signed_row(k, &phi);
            upper.push((t, -1.0));
            lp.add_constraint(upper.as_slice(), ComparisonOp::Le, 0.0);
            let mut lower: Vec<(Variable, f64)> = self.signed_row(k, &phi).into_iter().map(|(v, c)| (v, -c)).collect();
            lower.push((t, -1.0));
            lp.add_constraint(lower.as_slice(), ComparisonOp::Le, 0.0);
        }
        let ones: Vec<(Variable, f64)> = phi.iter().map(|&v| (v, 1.0)).collect();
        lp.add_constraint(ones.as_slice(), ComparisonOp::Eq, 1.0);
        let sol = lp
            .solve()
            .map_err(|e| Error::InvalidData(format!("sensitivity LP failed: {e}")))?;
        Ok((sol.objective().max(0.0), phi.iter().map(|&v| *sol.var_value(v)).collect()))
    }

    /// Largest `c'phi` subject to `||Psi_sigma phi||_inf <= 1` on the cone.
    fn l2_support_point(&self, c: &[f64]) -> Option<Vec<f64>> {
        let (mut lp, phi) = self.base(OptimizationDirection::Maximize, c);
        for k in 0..self.psi.nrows() {
            let row = self.signed_row(k, &phi);
            lp.add_constraint(row.as_slice(), ComparisonOp::Le, 1.0);
            lp.add_constraint(row.as_slice(), ComparisonOp::Ge, -1.0);
        }
        let sol = lp.solve().ok()?;
        Some(phi.iter().map(|&v| *sol.var_value(v)).collect())
    }

    /// Local maximum of `||phi||_2` over the slice polytope by repeated
    /// linearisation; returns `1 / ||phi||_2`.
    fn l2_estimate(&self, seed: u64) -> f64 {
        let p = self.psi.ncols();
        let mut starts: Vec<Vec<f64>> = vec![vec![1.0; p]];
        for i in 0..p {
            let mut e = vec![0.0; p];
            e[i] = 1.0;
            starts.push(e);
        }
        let mut stream = rng::stream(seed, 0);
        for _ in 0..L2_RANDOM_STARTS {
            starts.push((0..p).map(|_| stream.random::<f64>()).collect());
        }
        let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
        let mut best: f64 = 0.0;
        for start in starts {
            let mut c = start;
            let mut current: f64 = 0.0;
            for _ in 0..L2_ASCENT_STEPS {
                let Some(phi) = self.l2_support_point(&c) else {
                    // unbounded slice: the orthant contains a null direction
                    return 0.0;
                };
                let r = norm(&phi);
                if r <= current * (1.0 + 1e-12) {
                    break;
                }
                current = r;
                c = phi.iter().map(|v| v / r).collect();
            }
            best = best.max(current);
        }
        if best > 0.0 {
            1.0 / best
        } else {
            f64::INFINITY
        }
    }
}

/// Which kind of value [`kappa_exact_small`] returned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KappaCertificate {
    /// Exact up to LP tolerance.
    LpCertified,
    /// Local search value; the true coefficient is at most this.
    UpperBoundEstimate,
}

/// Exact `kappa_q(s, u)` by enumeration over supports and sign orthants
/// (`p <= 12`, `s <= 3`).
pub fn kappa_exact_small(psi: &DMatrix<f64>, s: usize, u: f64, q: u32) -> Result<(f64, KappaCertificate)> {
    check_q(q)?;
    check_su(s, u)?;
    let p = psi.ncols();
    if p == 0 || psi.nrows() == 0 {
        return Err(Error::Dimension("Psi must be nonempty".into()));
    }
    if p > MAX_EXACT_P || s > MAX_EXACT_S {
        return Err(Error::Budget(format!(
            "exact enumeration needs p <= {MAX_EXACT_P} and s <= {MAX_EXACT_S} (got p = {p}, s = {s}); use the lower bound instead"
        )));
    }
    // C_J(u) grows with J, so only supports of maximal size matter.
    let supports = subsets(p, s.min(p));
    // sign patterns with the first sign fixed; theta -> -theta covers the rest
    let patterns: Vec<Vec<f64>> = (0..1usize << (p - 1))
        .map(|bits| {
            (0..p)
                .map(|i| if i > 0 && bits >> (i - 1) & 1 == 1 { -1.0 } else { 1.0 })
                .collect()
        })
        .collect();
    let support_mask = |a: usize| {
        let mut mask = vec![false; p];
        for &i in &supports[a] {
            mask[i] = true;
        }
        mask
    };
    // Without the cone the orthant value bounds every support from below,
    // and is attained when its minimiser already lies in some C_J(u).
    let free: Vec<(f64, bool)> = patterns
        .par_iter()
        .map(|signs| -> Result<(f64, bool)> {
            let (bound, phi) = Orthant { psi, signs, in_support: None, u }.l1_value()?;
            let mut sorted = phi.clone();
            sorted.sort_by(|x, y| y.total_cmp(x));
            let top: f64 = sorted.iter().take(s).sum();
            let total: f64 = phi.iter().sum();
            Ok((bound, (1.0 + u) * top >= total))
        })
        .collect::<Result<_>>()?;
    let mut kappa = if q == 1 {
        free.iter().filter(|f| f.1).map(|f| f.0).fold(f64::INFINITY, f64::min)
    } else {
        f64::INFINITY
    };
    let mut order: Vec<usize> = (0..patterns.len()).collect();
    order.sort_by(|&a, &b| free[a].0.total_cmp(&free[b].0).then(a.cmp(&b)));
    // kappa_2 >= kappa_1 on every orthant, so LP values prune both cases
    for b in order {
        if free[b].0 >= kappa || (q == 1 && free[b].1) {
            continue;
        }
        let signs = &patterns[b];
        let best = kappa;
        let values: Vec<f64> = (0..supports.len())
            .into_par_iter()
            .map(|a| -> Result<f64> {
                let orthant = Orthant { psi, signs, in_support: Some(support_mask(a)), u };
                let (k1, _) = orthant.l1_value()?;
                Ok(if q == 1 || k1 >= best {
                    k1
                } else if k1 <= 0.0 {
                    0.0
                } else {
                    orthant.l2_estimate(rng::derive_seed(a as u64, b as u64))
                })
            })
            .collect::<Result<_>>()?;
        kappa = values.into_iter().fold(kappa, f64::min);
    }
    let cert = if q == 1 {
        KappaCertificate::LpCertified
    } else {
        KappaCertificate::UpperBoundEstimate
    };
    Ok((kappa, cert))
}

fn smallest_singular(a: &DMatrix<f64>) -> f64 {
    if a.nrows() < a.ncols() {
        return 0.0;
    }
    a.singular_values().min()
}

/// `(sigma_min(m), sigma_max(m))` over all `|J| <= m` rows and `|M| <= m`
/// columns of `Psi`, by full enumeration.
pub fn sparse_singular_bounds(psi: &DMatrix<f64>, m: usize) -> Result<(f64, f64)> {
    let (k, p) = psi.shape();
    if m == 0 {
        return Err(Error::Parameter("m must be at least 1".into()));
    }
    // Extra rows raise sigma_min and extra columns lower it, so the extremes
    // sit at the largest admissible sizes.
    let rows = m.min(k);
    let cols = m.min(p);
    let count = binomial(k, rows) * binomial(p, cols);
    if count > MAX_SUBMATRICES {
        return Err(Error::Budget(format!(
            "{count:.0} submatrices for m = {m} exceeds the budget of {MAX_SUBMATRICES:.0}"
        )));
    }
    let row_sets = subsets(k, rows);
    let col_sets = subsets(p, cols);
    let per_cols: Vec<(f64, f64)> = col_sets
        .par_iter()
        .map(|cs| {
            let sub_cols = psi.select_columns(cs.iter());
            let mut best_min: f64 = 0.0;
            let mut best_max: f64 = 0.0;
            for rs in &row_sets {
                let sub = sub_cols.select_rows(rs.iter());
                let sv = sub.singular_values();
                best_max = best_max.max(sv.max());
                best_min = best_min.max(smallest_singular(&sub));
            }
            (best_min, best_max)
        })
        .collect();
    let sigma_min = per_cols.iter().map(|v| v.0).fold(f64::INFINITY, f64::min);
    let sigma_max = per_cols.iter().map(|v| v.1).fold(0.0, f64::max);
    Ok((sigma_min, sigma_max))
}

/// Bound at a single `m` given the sparse singular values there.
pub fn lower_bound_term(sigma_min: f64, sigma_max: f64, m: usize, s: usize, u: f64, q: u32) -> f64 {
    let (m, s) = (m as f64, s as f64);
    let ratio = (1.0 + u) * (s / m).sqrt();
    let core = sigma_min / m.sqrt() - sigma_max / m.sqrt() * ratio;
    let exponent = 0.5 - 1.0 / q as f64;
    (core * s.powf(exponent) / ((1.0 + ratio) * (1.0 + u))).max(0.0)
}

/// Largest sparse-singular-value lower bound on `kappa_q(s, u)` over `m_grid`.
pub fn kappa_lower_bound(psi: &DMatrix<f64>, s: usize, u: f64, q: u32, m_grid: &[usize]) -> Result<f64> {
    let (bound, _, _) = lower_bound_with_values(psi, s, u, q, m_grid)?;
    Ok(bound)
}

type SigmaMap = BTreeMap<usize, f64>;

fn lower_bound_with_values(
    psi: &DMatrix<f64>,
    s: usize,
    u: f64,
    q: u32,
    m_grid: &[usize],
) -> Result<(f64, SigmaMap, SigmaMap)> {
    check_q(q)?;
    check_su(s, u)?;
    if m_grid.is_empty() {
        return Err(Error::Parameter("m grid must be nonempty".into()));
    }
    if let Some(&bad) = m_grid.iter().find(|&&m| m < s) {
        return Err(Error::Parameter(format!("grid value m = {bad} is below s = {s}")));
    }
    let mut smin = BTreeMap::new();
    let mut smax = BTreeMap::new();
    let mut bound: f64 = 0.0;
    for &m in m_grid {
        let (lo, hi) = sparse_singular_bounds(psi, m)?;
        smin.insert(m, lo);
        smax.insert(m, hi);
        bound = bound.max(lower_bound_term(lo, hi, m, s, u, q));
    }
    Ok((bound, smin, smax))
}

/// `s^{-1/q} mu_n^2 / 128`.
pub fn weak_iv_bound(mu_n: f64, s: usize, q: u32) -> Result<f64> {
    check_q(q)?;
    if !(mu_n > 0.0 && mu_n <= 1.0) {
        return Err(Error::Parameter(format!("mu_n must lie in (0, 1], got {mu_n}")));
    }
    if s == 0 {
        return Err(Error::Parameter("sparsity s must be at least 1".into()));
    }
    Ok((s as f64).powf(-1.0 / q as f64) * mu_n * mu_n / 128.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub q: u32,
    pub s: usize,
    pub u: f64,
    pub exact_kappa: Option<f64>,
    pub exact_certificate: Option<KappaCertificate>,
    pub lower_bound: f64,
    pub sigma_min_m: SigmaMap,
    pub sigma_max_m: SigmaMap,
    pub m_grid: Vec<usize>,
}

/// Lower bound over `m_grid`, plus the exact value when enumeration is within budget.
pub fn sensitivity_report(psi: &DMatrix<f64>, s: usize, u: f64, q: u32, m_grid: &[usize]) -> Result<SensitivityReport> {
    let (lower_bound, sigma_min_m, sigma_max_m) = lower_bound_with_values(psi, s, u, q, m_grid)?;
    let exact = match kappa_exact_small(psi, s, u, q) {
        Ok(v) => Some(v),
        Err(Error::Budget(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(SensitivityReport {
        q,
        s,
        u,
        exact_kappa: exact.map(|v| v.0),
        exact_certificate: exact.map(|v| v.1),
        lower_bound,
        sigma_min_m,
        sigma_max_m,
        m_grid: m_grid.to_vec(),
    })
}
