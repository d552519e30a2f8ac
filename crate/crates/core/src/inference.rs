//! Debiased coefficients, variance estimates and multiplier-bootstrap bands.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, PenaltyConfig};
use crate::error::{Error, Result};
use crate::rng;
use crate::solver::SolverOptions;
use crate::stage1::{self, Stage1Fit};
use crate::stage2::{self, OrthogonalInstrumentFit};
use crate::stats::normal_quantile;

/// Relative threshold below which `|omega_hat|` is treated as a failed
/// relevance condition.
pub const RELEVANCE_GUARD: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DebiasedEstimate {
    /// Zero-based coefficient index.
    pub j: usize,
    pub beta_check: f64,
    pub omega_hat: f64,
    pub sigma_hat: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BandEntry {
    pub j: usize,
    pub beta_check: f64,
    pub sigma_hat: f64,
    pub interval: Interval,
    /// Set when the interval degenerates because `sigma_hat == 0`.
    pub warning: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceBand {
    pub targets: Vec<usize>,
    pub alpha: f64,
    pub critical_value: f64,
    pub entries: Vec<BandEntry>,
    pub draws: usize,
    pub seed: u64,
}

impl ConfidenceBand {
    pub fn max_width(&self) -> f64 {
        self.entries.iter().map(|e| e.interval.width()).fold(0.0, f64::max)
    }
}

fn check_mu(dataset: &Dataset, mu: &[f64]) -> Result<()> {
    if mu.len() != dataset.k() {
        return Err(Error::Dimension(format!(
            "instrument weights have length {}, dataset has K = {}",
            mu.len(),
            dataset.k()
        )));
    }
    Ok(())
}

fn check_beta(dataset: &Dataset, j: usize, beta: &[f64]) -> Result<()> {
    if beta.len() != dataset.p() {
        return Err(Error::Dimension(format!(
            "beta has length {}, dataset has p = {}",
            beta.len(),
            dataset.p()
        )));
    }
    if j >= dataset.p() {
        return Err(Error::Parameter(format!("index {j} out of range for p = {}", dataset.p())));
    }
    Ok(())
}

/// Constructed instrument `Z mu`.
pub fn constructed_instrument(dataset: &Dataset, mu: &[f64]) -> DVector<f64> {
    dataset.z() * DVector::from_column_slice(mu)
}

fn rms(v: impl Iterator<Item = f64>, n: usize) -> f64 {
    (v.map(|a| a * a).sum::<f64>() / n as f64).sqrt()
}

/// `y - sum_{k != skip} x_k beta_k` (all coordinates when `skip` is `None`).
fn residual(dataset: &Dataset, beta: &[f64], skip: Option<usize>) -> DVector<f64> {
    let mut r = dataset.y().clone();
    for (k, &b) in beta.iter().enumerate() {
        if Some(k) != skip && b != 0.0 {
            r.axpy(-b, &dataset.x().column(k), 1.0);
        }
    }
    r
}

/// `E_n[x_j z'mu]`, guarded against a vanishing instrument.
fn guarded_omega(dataset: &Dataset, j: usize, instrument: &DVector<f64>) -> Result<f64> {
    let n = dataset.n();
    let x_j = dataset.x().column(j);
    let omega = x_j.dot(instrument) / n as f64;
    let bound = RELEVANCE_GUARD * rms(x_j.iter().copied(), n) * rms(instrument.iter().copied(), n);
    if !(omega.abs() > bound) {
        return Err(Error::WeakInstrument { j, omega });
    }
    Ok(omega)
}

/// `(beta_check_j, omega_hat_j)` solving `E_n[(y - x_j b - x_{-j}'beta_{-j}) z'mu] = 0`.
pub fn debiased_coefficient(dataset: &Dataset, j: usize, beta_hat: &[f64], mu: &[f64]) -> Result<(f64, f64)> {
    check_beta(dataset, j, beta_hat)?;
    check_mu(dataset, mu)?;
    let instrument = constructed_instrument(dataset, mu);
    let omega = guarded_omega(dataset, j, &instrument)?;
    let r = residual(dataset, beta_hat, Some(j));
    let beta_check = r.dot(&instrument) / dataset.n() as f64 / omega;
    Ok((beta_check, omega))
}

/// `|E_n[(y - x_j beta_check - x_{-j}'beta_{-j}) z'mu]|`.
pub fn moment_residual(dataset: &Dataset, j: usize, beta_hat: &[f64], mu: &[f64], beta_check: f64) -> Result<f64> {
    check_beta(dataset, j, beta_hat)?;
    check_mu(dataset, mu)?;
    let instrument = constructed_instrument(dataset, mu);
    let mut r = residual(dataset, beta_hat, Some(j));
    r.axpy(-beta_check, &dataset.x().column(j), 1.0);
    Ok((r.dot(&instrument) / dataset.n() as f64).abs())
}

/// [`moment_residual`] divided by `rms(y) * rms(z'mu)`.
pub fn relative_moment_residual(
    dataset: &Dataset,
    j: usize,
    beta_hat: &[f64],
    mu: &[f64],
    beta_check: f64,
) -> Result<f64> {
    let abs = moment_residual(dataset, j, beta_hat, mu, beta_check)?;
    let n = dataset.n();
    let scale = rms(dataset.y().iter().copied(), n) * rms(constructed_instrument(dataset, mu).iter().copied(), n);
    Ok(if scale > 0.0 { abs / scale } else { abs })
}

/// `sigma_hat_j^2 = omega^{-2} E_n[((y - x'beta_hat) z'mu)^2]` with the full `beta_hat`.
pub fn variance_estimate(
    dataset: &Dataset,
    j: usize,
    beta_hat: &[f64],
    mu: &[f64],
    omega_hat: f64,
) -> Result<f64> {
    check_beta(dataset, j, beta_hat)?;
    check_mu(dataset, mu)?;
    let instrument = constructed_instrument(dataset, mu);
    let bound = RELEVANCE_GUARD
        * rms(dataset.x().column(j).iter().copied(), dataset.n())
        * rms(instrument.iter().copied(), dataset.n());
    if !(omega_hat.abs() > bound) {
        return Err(Error::WeakInstrument { j, omega: omega_hat });
    }
    let r = residual(dataset, beta_hat, None);
    let second = r.component_mul(&instrument).map(|v| v * v).sum() / dataset.n() as f64;
    Ok(second.sqrt() / omega_hat.abs())
}

pub fn estimate_coefficient(dataset: &Dataset, j: usize, beta_hat: &[f64], mu: &[f64]) -> Result<DebiasedEstimate> {
    let (beta_check, omega_hat) = debiased_coefficient(dataset, j, beta_hat, mu)?;
    let sigma_hat = variance_estimate(dataset, j, beta_hat, mu, omega_hat)?;
    Ok(DebiasedEstimate {
        j,
        beta_check,
        omega_hat,
        sigma_hat,
    })
}

/// Columns `psi_ij = (y_i - x_i'beta_hat) z_i'mu^j / (sigma_hat_j omega_hat_j)`, one per target.
pub fn normalized_scores(
    dataset: &Dataset,
    beta_hat: &[f64],
    mus: &[&[f64]],
    estimates: &[DebiasedEstimate],
) -> Result<DMatrix<f64>> {
    if mus.len() != estimates.len() {
        return Err(Error::Dimension(format!(
            "{} instrument vectors for {} estimates",
            mus.len(),
            estimates.len()
        )));
    }
    let r = residual(dataset, beta_hat, None);
    let mut scores = DMatrix::zeros(dataset.n(), estimates.len());
    for (c, (mu, est)) in mus.iter().zip(estimates).enumerate() {
        check_mu(dataset, mu)?;
        let denom = est.sigma_hat * est.omega_hat;
        if !(denom.abs() > 0.0) || !denom.is_finite() {
            return Err(Error::ZeroScoreVariance(est.j));
        }
        let instrument = constructed_instrument(dataset, mu);
        scores.set_column(c, &(r.component_mul(&instrument) / denom));
    }
    Ok(scores)
}

/// `max_j |G_j|` for each draw `b`, with `G_j = -n^{-1/2} sum_i g_i psi_ij`
/// and multipliers taken from stream `(seed, b)`.
pub fn bootstrap_max_statistics(scores: &DMatrix<f64>, draws: usize, seed: u64) -> Vec<f64> {
    let n = scores.nrows();
    let scale = -1.0 / (n as f64).sqrt();
    (0..draws)
        .into_par_iter()
        .map(|b| {
            let mut g = vec![0.0; n];
            rng::fill_standard_normal(seed, b as u64, &mut g);
            let g = DVector::from_vec(g);
            scores
                .tr_mul(&g)
                .iter()
                .fold(0.0_f64, |m, v| m.max((scale * v).abs()))
        })
        .collect()
}

/// Order statistic of rank `ceil((1 - alpha) B)`.
pub fn critical_value_from(stats: &[f64], alpha: f64) -> Result<f64> {
    if stats.is_empty() {
        return Err(Error::Parameter("no bootstrap statistics".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Parameter(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let mut sorted = stats.to_vec();
    sorted.sort_by(f64::total_cmp);
    let b = sorted.len();
    let rank = (((1.0 - alpha) * b as f64).ceil() as usize).clamp(1, b);
    Ok(sorted[rank - 1])
}

pub const MIN_DRAWS: usize = 100;

/// Bootstrap critical value `c*_{alpha,S}` for the score columns of `S`.
pub fn multiplier_bootstrap(scores: &DMatrix<f64>, alpha: f64, draws: usize, seed: u64) -> Result<f64> {
    if draws < MIN_DRAWS {
        return Err(Error::Parameter(format!("need at least {MIN_DRAWS} bootstrap draws, got {draws}")));
    }
    if scores.ncols() == 0 {
        return Err(Error::Parameter("target set must be nonempty".into()));
    }
    for (c, col) in scores.column_iter().enumerate() {
        if col.iter().all(|&v| v == 0.0) {
            return Err(Error::ZeroScoreVariance(c));
        }
    }
    critical_value_from(&bootstrap_max_statistics(scores, draws, seed), alpha)
}

fn band_entry(est: &DebiasedEstimate, half: f64) -> BandEntry {
    BandEntry {
        j: est.j,
        beta_check: est.beta_check,
        sigma_hat: est.sigma_hat,
        interval: Interval {
            lo: est.beta_check - half,
            hi: est.beta_check + half,
        },
        warning: (est.sigma_hat == 0.0).then(|| "zero variance estimate: interval has zero width".to_string()),
    }
}

/// `beta_check_j +/- c* sigma_hat_j / sqrt(n)` for every estimate.
pub fn simultaneous_bands(
    estimates: &[DebiasedEstimate],
    c_star: f64,
    n: usize,
    alpha: f64,
    draws: usize,
    seed: u64,
) -> Result<ConfidenceBand> {
    if !(c_star >= 0.0) {
        return Err(Error::Parameter(format!("critical value must be non-negative, got {c_star}")));
    }
    let root_n = (n as f64).sqrt();
    Ok(ConfidenceBand {
        targets: estimates.iter().map(|e| e.j).collect(),
        alpha,
        critical_value: c_star,
        entries: estimates
            .iter()
            .map(|e| band_entry(e, c_star * e.sigma_hat / root_n))
            .collect(),
        draws,
        seed,
    })
}

/// `beta_check_j +/- Phi^{-1}(1 - alpha/2) sigma_hat_j / sqrt(n)`.
pub fn pointwise_interval(estimate: &DebiasedEstimate, n: usize, alpha: f64) -> Result<Interval> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Parameter(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let half = normal_quantile(1.0 - alpha / 2.0) * estimate.sigma_hat / (n as f64).sqrt();
    Ok(Interval {
        lo: estimate.beta_check - half,
        hi: estimate.beta_check + half,
    })
}

/// Settings of the full estimation pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub alpha: f64,
    pub draws: usize,
    pub seed: u64,
    pub c: f64,
    /// Assumed sensitivity `kappa_1(s, 3)` of the design. When set, each
    /// `lambda_t` is raised to `2 tau / kappa` so that `tau <= lambda_t kappa / 2`.
    #[serde(default)]
    pub kappa_floor: Option<f64>,
    pub solver: SolverOptions,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            draws: 2000,
            seed: 0,
            c: 1.1,
            kappa_floor: None,
            solver: SolverOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceResult {
    pub stage1: Stage1Fit,
    pub instruments: Vec<OrthogonalInstrumentFit>,
    pub estimates: Vec<DebiasedEstimate>,
    pub band: ConfidenceBand,
    pub pointwise: Vec<Interval>,
}

/// Applies the `kappa_floor` rule of [`PipelineConfig`] to a default penalty pair.
pub fn apply_kappa_floor(pen: PenaltyConfig, kappa: Option<f64>) -> Result<PenaltyConfig> {
    match kappa {
        None => Ok(pen),
        Some(k) if k > 0.0 && k.is_finite() => {
            PenaltyConfig::new(pen.lambda_t.max(2.0 * pen.tau / k), pen.tau, pen.c, pen.alpha)
        }
        Some(k) => Err(Error::Parameter(format!("kappa floor must be positive, got {k}"))),
    }
}

/// Stage-1 penalties used by [`infer`].
pub fn stage1_penalties(dataset: &Dataset, config: &PipelineConfig) -> Result<PenaltyConfig> {
    let pen = stage1::default_penalties_stage1(dataset.n(), dataset.p(), config.alpha, stage1::compute_h1n(dataset))?;
    apply_kappa_floor(pen, config.kappa_floor)
}

/// Stage-2 penalties used by [`infer`] for a target set of size `s_size`.
pub fn stage2_penalties(dataset: &Dataset, s_size: usize, config: &PipelineConfig) -> Result<PenaltyConfig> {
    let pen = stage2::default_penalties_stage2(
        dataset.n(),
        dataset.p(),
        dataset.k(),
        s_size,
        config.alpha,
        stage2::compute_h2n(dataset),
        config.c,
    )?;
    apply_kappa_floor(pen, config.kappa_floor)
}

/// Stage-2 fits for every target in `targets`.
pub fn fit_instruments(
    dataset: &Dataset,
    targets: &[usize],
    config: &PipelineConfig,
) -> Result<Vec<OrthogonalInstrumentFit>> {
    let pen2 = stage2_penalties(dataset, targets.len(), config)?;
    targets
        .par_iter()
        .map(|&j| stage2::fit_instrument_with(dataset, j, &pen2, &config.solver))
        .collect()
}

/// Stage 1, stage 2 for each target, debiasing, bootstrap bands and pointwise intervals.
pub fn infer(dataset: &Dataset, targets: &[usize], config: &PipelineConfig) -> Result<InferenceResult> {
    dataset.ensure_valid()?;
    if targets.is_empty() {
        return Err(Error::Parameter("target set must be nonempty".into()));
    }
    if let Some(&bad) = targets.iter().find(|&&j| j >= dataset.p()) {
        return Err(Error::Parameter(format!("index {bad} out of range for p = {}", dataset.p())));
    }
    let pen1 = stage1_penalties(dataset, config)?;
    let fit1 = stage1::fit_beta_with(dataset, &pen1, &config.solver)?;
    let fits = fit_instruments(dataset, targets, config)?;
    let estimates = fits
        .iter()
        .map(|f| estimate_coefficient(dataset, f.j, &fit1.beta_hat, &f.mu_hat))
        .collect::<Result<Vec<_>>>()?;
    let mus: Vec<&[f64]> = fits.iter().map(|f| f.mu_hat.as_slice()).collect();
    let scores = normalized_scores(dataset, &fit1.beta_hat, &mus, &estimates)?;
    let c_star = multiplier_bootstrap(&scores, config.alpha, config.draws, config.seed)?;
    let band = simultaneous_bands(&estimates, c_star, dataset.n(), config.alpha, config.draws, config.seed)?;
    let pointwise = estimates
        .iter()
        .map(|e| pointwise_interval(e, dataset.n(), config.alpha))
        .collect::<Result<Vec<_>>>()?;
    Ok(InferenceResult {
        stage1: fit1,
        instruments: fits,
        estimates,
        band,
        pointwise,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar() -> Dataset {
        let x = vec![1.0, -2.0, 0.5, 3.0, -1.0];
        Dataset::from_rows(
            x.iter().map(|v| 2.0 * v).collect(),
            &x.iter().map(|&v| vec![v]).collect::<Vec<_>>(),
            &x.iter().map(|&v| vec![v, 0.3]).collect::<Vec<_>>(),
        )
        .unwrap()
    }

    #[test]
    fn exact_scalar_case() {
        let d = scalar();
        let (b, omega) = debiased_coefficient(&d, 0, &[0.0], &[1.0, 0.0]).unwrap();
        assert!((b - 2.0).abs() < 1e-14);
        let ex2 = d.x().column(0).map(|v| v * v).sum() / 5.0;
        assert!((omega - ex2).abs() < 1e-14);
        assert_eq!(variance_estimate(&d, 0, &[2.0], &[1.0, 0.0], omega).unwrap(), 0.0);
    }

    #[test]
    fn zero_instrument_is_weak() {
        let d = scalar();
        assert!(matches!(
            debiased_coefficient(&d, 0, &[0.0], &[0.0, 0.0]),
            Err(Error::WeakInstrument { j: 0, .. })
        ));
    }

    #[test]
    fn sigma_scales_inversely_with_omega() {
        let d = scalar();
        let s1 = variance_estimate(&d, 0, &[1.0], &[1.0, 0.0], 2.0).unwrap();
        let s2 = variance_estimate(&d, 0, &[1.0], &[1.0, 0.0], 6.0).unwrap();
        assert!((s1 / s2 - 3.0).abs() < 1e-12);
    }

    #[test]
    fn order_statistic_rank() {
        let stats: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(critical_value_from(&stats, 0.05).unwrap(), 95.0);
        assert_eq!(critical_value_from(&stats, 0.051).unwrap(), 95.0);
        assert_eq!(critical_value_from(&stats, 0.049).unwrap(), 96.0);
    }

    #[test]
    fn duplicated_scores_collapse_to_singleton() {
        let col: Vec<f64> = (0..50).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let one = DMatrix::from_column_slice(50, 1, &col);
        let two = DMatrix::from_fn(50, 2, |i, _| col[i]);
        let a = multiplier_bootstrap(&one, 0.05, 500, 9).unwrap();
        let b = multiplier_bootstrap(&two, 0.05, 500, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bands_and_pointwise() {
        let est = DebiasedEstimate {
            j: 0,
            beta_check: 1.0,
            omega_hat: 1.0,
            sigma_hat: 2.0,
        };
        let band = simultaneous_bands(&[est], 0.0, 100, 0.05, 1000, 1).unwrap();
        assert_eq!(band.entries[0].interval, Interval { lo: 1.0, hi: 1.0 });
        let zero = DebiasedEstimate { sigma_hat: 0.0, ..est };
        let band = simultaneous_bands(&[zero], 2.0, 100, 0.05, 1000, 1).unwrap();
        assert!(band.entries[0].warning.is_some());
        let iv = pointwise_interval(&est, 100, 0.05).unwrap();
        assert!((iv.width() / 2.0 - 1.959_963_984_540_054 * 0.2).abs() < 1e-12);
        let narrower = pointwise_interval(&est, 100, 0.2).unwrap();
        assert!(narrower.width() < iv.width());
    }
}
