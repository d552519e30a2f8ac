//! Monte Carlo design with `L` strong instruments per endogenous regressor.
//!
//! ```text
//!     y = x'beta0 + eps,   x_j = xt_j + sum_{k=1..L} z_{L(j-1)+k},   eps = zeta + xt'gamma0
//! ```
//! with `z ~ N(0, I_K)`, `xt ~ N(0, Sigma)`, `Sigma_ij = 0.3^{|i-j|}`,
//! `zeta ~ N(0, 1/16)`, `beta0 = (1, .8, .6, .4, .2, 0, ...)` and
//! `gamma0 = (.1, .2, ..., 1, 0, ...)`.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, GroundTruth};
use crate::error::{Error, Result};
use crate::inference::{self, PipelineConfig};
use crate::rng;
use crate::stats::normal_quantile;

const RHO: f64 = 0.3;
const ZETA_SD: f64 = 0.25;
const BETA_PATTERN: [f64; 5] = [1.0, 0.8, 0.6, 0.4, 0.2];
const GAMMA_LEN: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DgpParams {
    pub n: usize,
    pub p: usize,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "L")]
    pub l: usize,
    pub seed: u64,
    /// Drops `zeta` and `gamma0`, leaving an exact exogenous model.
    #[serde(default)]
    pub noise_free: bool,
}

impl DgpParams {
    pub fn new(n: usize, p: usize, k: usize, l: usize, seed: u64) -> Result<Self> {
        let params = Self {
            n,
            p,
            k,
            l,
            seed,
            noise_free: false,
        };
        params.check()?;
        Ok(params)
    }

    pub fn check(&self) -> Result<()> {
        if self.n < 2 || self.p == 0 || self.l == 0 {
            return Err(Error::Parameter(format!(
                "need n >= 2, p >= 1, L >= 1 (got n = {}, p = {}, L = {})",
                self.n, self.p, self.l
            )));
        }
        if self.k != self.l * self.p {
            return Err(Error::Parameter(format!(
                "K must equal L * p ({} * {}), got {}",
                self.l, self.p, self.k
            )));
        }
        Ok(())
    }

    /// Notes about truncations applied to the design.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.p < GAMMA_LEN && !self.noise_free {
            out.push(format!("gamma0 truncated to its first {} entries", self.p));
        }
        out
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }
}

pub fn beta0(p: usize) -> Vec<f64> {
    (0..p).map(|j| BETA_PATTERN.get(j).copied().unwrap_or(0.0)).collect()
}

pub fn gamma0(p: usize) -> Vec<f64> {
    (0..p)
        .map(|j| if j < GAMMA_LEN { (j + 1) as f64 / 10.0 } else { 0.0 })
        .collect()
}

/// `kappa_1(s, 3)` of `Psi = E[z x']` with `s = ||beta0||_0`.
///
/// Every row of `Psi` is a coordinate vector, so `||Psi theta||_inf = ||theta||_inf`
/// and the minimum spreads a quarter of the mass evenly over `J`.
pub fn population_kappa(p: usize) -> f64 {
    let s = beta0(p).iter().filter(|b| **b != 0.0).count().max(1);
    (1.0 / (4.0 * s as f64)).max(1.0 / p as f64)
}

/// `Sigma_ij = 0.3^{|i - j|}`.
pub fn ar_covariance(p: usize) -> DMatrix<f64> {
    DMatrix::from_fn(p, p, |i, j| RHO.powi((i as i32 - j as i32).abs()))
}

/// Population nuisance values of one target coefficient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationTarget {
    pub j: usize,
    pub mu0: Vec<f64>,
    pub theta0: Vec<f64>,
    /// `E[x_j z'mu0]`.
    pub omega: f64,
    /// `sqrt(E[(xi z'mu0)^2]) / |omega|`.
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Population {
    pub beta0: Vec<f64>,
    pub var_xi: f64,
    pub targets: Vec<PopulationTarget>,
}

impl Population {
    pub fn target(&self, j: usize) -> Option<&PopulationTarget> {
        self.targets.iter().find(|t| t.j == j)
    }
}

/// Minimiser of `E[(x_j - z'mu - x_{-j}'theta)^2]` subject to
/// `E[x_{-j} z'] mu = 0`, from the design's second moments.
pub fn population_target(params: &DgpParams, j: usize) -> Result<PopulationTarget> {
    params.check()?;
    let (p, k, l) = (params.p, params.k, params.l);
    if j >= p {
        return Err(Error::Parameter(format!("target {j} out of range for p = {p}")));
    }
    // E[z x'] has a unit block for each regressor; E[x x'] = Sigma + L I.
    let block = |row: usize, col: usize| -> f64 {
        if row / l == col {
            1.0
        } else {
            0.0
        }
    };
    let exx = ar_covariance(p) + DMatrix::identity(p, p) * l as f64;
    let rest: Vec<usize> = (0..p).filter(|&c| c != j).collect();
    let dim = k + p - 1;
    let m = p - 1;

    let mut kkt = DMatrix::zeros(dim + m, dim + m);
    let mut rhs = DVector::zeros(dim + m);
    for a in 0..k {
        kkt[(a, a)] = 1.0;
        rhs[a] = block(a, j);
        for (b, &c) in rest.iter().enumerate() {
            kkt[(a, k + b)] = block(a, c);
            kkt[(k + b, a)] = block(a, c);
            // constraint row b: E[x_c z'] mu = 0
            kkt[(dim + b, a)] = block(a, c);
            kkt[(a, dim + b)] = block(a, c);
        }
    }
    for (a, &ca) in rest.iter().enumerate() {
        rhs[k + a] = exx[(ca, j)];
        for (b, &cb) in rest.iter().enumerate() {
            kkt[(k + a, k + b)] = exx[(ca, cb)];
        }
    }
    let sol = kkt
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::InvalidData("singular population system".into()))?;
    let mu0: Vec<f64> = sol.rows(0, k).iter().copied().collect();
    let theta0: Vec<f64> = sol.rows(k, m).iter().copied().collect();
    let omega: f64 = (0..k).map(|a| block(a, j) * mu0[a]).sum();
    let norm2: f64 = mu0.iter().map(|v| v * v).sum();
    let var_xi = population_var_xi(params);
    Ok(PopulationTarget {
        j,
        sigma: (var_xi * norm2).sqrt() / omega.abs(),
        mu0,
        theta0,
        omega,
    })
}

/// `Var(xi) = 1/16 + gamma0' Sigma gamma0` (0 for the noise-free variant).
pub fn population_var_xi(params: &DgpParams) -> f64 {
    if params.noise_free {
        return 0.0;
    }
    let g = DVector::from_vec(gamma0(params.p));
    ZETA_SD * ZETA_SD + g.dot(&(ar_covariance(params.p) * &g))
}

pub fn population(params: &DgpParams, targets: &[usize]) -> Result<Population> {
    Ok(Population {
        beta0: beta0(params.p),
        var_xi: population_var_xi(params),
        targets: targets
            .iter()
            .map(|&j| population_target(params, j))
            .collect::<Result<_>>()?,
    })
}

/// Default target set `{0, 1, 2}` (truncated when `p < 3`).
pub fn default_targets(p: usize) -> Vec<usize> {
    (0..p.min(3)).collect()
}

/// Draws one sample from stream `(seed, 0)` and attaches the truth.
pub fn generate_dgp(params: &DgpParams) -> Result<Dataset> {
    let pop = population(params, &default_targets(params.p))?;
    generate_with_population(params, &pop)
}

pub fn generate_with_population(params: &DgpParams, pop: &Population) -> Result<Dataset> {
    params.check()?;
    let (n, p, k, l) = (params.n, params.p, params.k, params.l);
    let gamma = gamma0(p);
    let beta = beta0(p);
    let innovation = (1.0 - RHO * RHO).sqrt();
    let mut stream = rng::stream(params.seed, 0);
    let mut draw = || -> f64 { StandardNormal.sample(&mut stream) };

    let mut z = DMatrix::zeros(n, k);
    let mut x = DMatrix::zeros(n, p);
    let mut y = DVector::zeros(n);
    let mut xi = vec![0.0; n];
    let mut xt = vec![0.0; p];
    for i in 0..n {
        for c in 0..k {
            z[(i, c)] = draw();
        }
        for c in 0..p {
            let e = draw();
            xt[c] = if c == 0 { e } else { RHO * xt[c - 1] + innovation * e };
        }
        let zeta = ZETA_SD * draw();
        let eps = if params.noise_free {
            0.0
        } else {
            zeta + xt.iter().zip(&gamma).map(|(a, b)| a * b).sum::<f64>()
        };
        let mut fit = 0.0;
        for c in 0..p {
            let loads: f64 = (0..l).map(|b| z[(i, l * c + b)]).sum();
            x[(i, c)] = xt[c] + loads;
            fit += x[(i, c)] * beta[c];
        }
        y[i] = fit + eps;
        xi[i] = eps;
    }
    let mu0: BTreeMap<usize, Vec<f64>> = pop.targets.iter().map(|t| (t.j, t.mu0.clone())).collect();
    Ok(Dataset::new(y, x, z)?.with_truth(GroundTruth { beta0: beta, xi, mu0 }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub targets: Vec<usize>,
    pub pipeline: PipelineConfig,
}

impl SimulationConfig {
    pub fn new(p: usize, pipeline: PipelineConfig) -> Self {
        Self {
            targets: default_targets(p),
            pipeline,
        }
    }

    /// Pipeline with `kappa_floor` set to [`population_kappa`].
    pub fn calibrated(p: usize, pipeline: PipelineConfig) -> Self {
        let pipeline = PipelineConfig {
            kappa_floor: Some(population_kappa(p)),
            ..pipeline
        };
        Self::new(p, pipeline)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub seed: u64,
    /// All targets inside the simultaneous band.
    pub covered: bool,
    pub pointwise_covered: Vec<bool>,
    pub max_width: f64,
    /// `beta_check_j - beta0_j` per target.
    pub errors: Vec<f64>,
    pub critical_value: f64,
    pub sigma_hat: Vec<f64>,
    /// Largest relative closed-form moment residual over the targets.
    pub moment_residual: f64,
}

impl ReplicationRecord {
    pub fn max_abs_error(&self) -> f64 {
        self.errors.iter().fold(0.0, |m, e| m.max(e.abs()))
    }
}

fn tag(seed: u64, err: Error) -> Error {
    Error::Replication {
        seed,
        source: Box::new(err),
    }
}

/// Full pipeline on one simulated sample; the bootstrap uses stream seed
/// `derive_seed(seed, 1)`.
pub fn run_replication(params: &DgpParams, config: &SimulationConfig) -> Result<ReplicationRecord> {
    let pop = population(params, &config.targets)?;
    run_replication_with(params, &pop, config)
}

fn run_replication_with(params: &DgpParams, pop: &Population, config: &SimulationConfig) -> Result<ReplicationRecord> {
    let seed = params.seed;
    let data = generate_with_population(params, pop).map_err(|e| tag(seed, e))?;
    let mut pipeline = config.pipeline.clone();
    pipeline.seed = rng::derive_seed(seed, 1);
    let result = inference::infer(&data, &config.targets, &pipeline).map_err(|e| tag(seed, e))?;
    let beta = &pop.beta0;
    let entries = &result.band.entries;
    let mut moment = 0.0_f64;
    for (est, fit) in result.estimates.iter().zip(&result.instruments) {
        let r = inference::relative_moment_residual(&data, est.j, &result.stage1.beta_hat, &fit.mu_hat, est.beta_check)
            .map_err(|e| tag(seed, e))?;
        moment = moment.max(r);
    }
    Ok(ReplicationRecord {
        seed,
        covered: entries.iter().all(|e| e.interval.contains(beta[e.j])),
        pointwise_covered: result
            .pointwise
            .iter()
            .zip(&result.estimates)
            .map(|(iv, e)| iv.contains(beta[e.j]))
            .collect(),
        max_width: result.band.max_width(),
        errors: result.estimates.iter().map(|e| e.beta_check - beta[e.j]).collect(),
        critical_value: result.band.critical_value,
        sigma_hat: result.estimates.iter().map(|e| e.sigma_hat).collect(),
        moment_residual: moment,
    })
}

/// Mean and standard error of the mean.
fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, f64::NAN);
    }
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MCSummary {
    pub params: DgpParams,
    pub targets: Vec<usize>,
    pub reps: usize,
    pub failures: usize,
    /// Fraction of replications whose simultaneous band misses some target.
    pub rp05: f64,
    pub rp05_se: f64,
    /// Mean over replications of the largest band width.
    pub linf_width: f64,
    pub linf_width_se: f64,
    /// Mean over replications of `max_j |beta_check_j - beta0_j|`.
    pub linf_error: f64,
    pub linf_error_se: f64,
    pub bias: Vec<f64>,
    pub bias_se: Vec<f64>,
    pub pointwise_coverage: Vec<f64>,
    pub max_moment_residual: f64,
}

impl MCSummary {
    /// One table row: `n p K L | rp(.05) l_inf | bias per target`.
    pub fn table_row(&self) -> String {
        let mut row = format!(
            "{} & {} & {} & {} & {:.3} & {:.4}",
            self.params.n, self.params.p, self.params.k, self.params.l, self.rp05, self.linf_width
        );
        for b in &self.bias {
            row.push_str(&format!(" & {b:.4}"));
        }
        row
    }

    pub fn table_header(&self) -> String {
        let mut head = "n & p & K & L & rp(.05) & l_inf".to_string();
        for j in &self.targets {
            head.push_str(&format!(" & bias{}", j + 1));
        }
        head
    }
}

/// Runs `reps` replications with seeds `derive_seed(base_seed, r)`.
pub fn monte_carlo(params: &DgpParams, reps: usize, base_seed: u64, config: &SimulationConfig) -> Result<MCSummary> {
    let outcomes = monte_carlo_records(params, reps, base_seed, config)?;
    summarize(params, config, &outcomes)
}

pub fn monte_carlo_records(
    params: &DgpParams,
    reps: usize,
    base_seed: u64,
    config: &SimulationConfig,
) -> Result<Vec<Result<ReplicationRecord>>> {
    if reps == 0 {
        return Err(Error::Parameter("need at least one replication".into()));
    }
    params.check()?;
    let pop = population(params, &config.targets)?;
    Ok((0..reps as u64)
        .into_par_iter()
        .map(|r| run_replication_with(&params.with_seed(rng::derive_seed(base_seed, r)), &pop, config))
        .collect())
}

pub fn summarize(params: &DgpParams, config: &SimulationConfig, outcomes: &[Result<ReplicationRecord>]) -> Result<MCSummary> {
    let total = outcomes.len();
    let records: Vec<&ReplicationRecord> = outcomes.iter().filter_map(|o| o.as_ref().ok()).collect();
    let failures = total - records.len();
    if failures * 20 > total || records.is_empty() {
        return Err(Error::TooManyFailures { failed: failures, total });
    }
    let missed: Vec<f64> = records.iter().map(|r| if r.covered { 0.0 } else { 1.0 }).collect();
    let widths: Vec<f64> = records.iter().map(|r| r.max_width).collect();
    let errs: Vec<f64> = records.iter().map(|r| r.max_abs_error()).collect();
    let (rp05, rp05_se) = mean_se(&missed);
    let (linf_width, linf_width_se) = mean_se(&widths);
    let (linf_error, linf_error_se) = mean_se(&errs);
    let mut bias = Vec::new();
    let mut bias_se = Vec::new();
    let mut pointwise = Vec::new();
    for t in 0..config.targets.len() {
        let e: Vec<f64> = records.iter().map(|r| r.errors[t]).collect();
        let (m, se) = mean_se(&e);
        bias.push(m);
        bias_se.push(se);
        let hits = records.iter().filter(|r| r.pointwise_covered[t]).count();
        pointwise.push(hits as f64 / records.len() as f64);
    }
    Ok(MCSummary {
        params: params.with_seed(0),
        targets: config.targets.clone(),
        reps: total,
        failures,
        rp05,
        rp05_se,
        linf_width,
        linf_width_se,
        linf_error,
        linf_error_se,
        bias,
        bias_se,
        pointwise_coverage: pointwise,
        max_moment_residual: records.iter().map(|r| r.moment_residual).fold(0.0, f64::max),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleRecord {
    /// `sqrt(n) (beta_check_j - beta0_j) / sigma_j` with population `sigma_j`.
    pub standardized: Vec<f64>,
    /// Pointwise interval built from `sigma_hat` covers `beta0_j`.
    pub covered: Vec<bool>,
}

/// Debiasing with the true `beta0` and population `mu0` in place of the fits.
pub fn oracle_replication(params: &DgpParams, pop: &Population, alpha: f64) -> Result<OracleRecord> {
    let data = generate_with_population(params, pop)?;
    let root_n = (params.n as f64).sqrt();
    let quantile = normal_quantile(1.0 - alpha / 2.0);
    let mut standardized = Vec::new();
    let mut covered = Vec::new();
    for t in &pop.targets {
        let est = inference::estimate_coefficient(&data, t.j, &pop.beta0, &t.mu0)?;
        let truth = pop.beta0[t.j];
        standardized.push(root_n * (est.beta_check - truth) / t.sigma);
        covered.push((est.beta_check - truth).abs() <= quantile * est.sigma_hat / root_n);
    }
    Ok(OracleRecord { standardized, covered })
}
