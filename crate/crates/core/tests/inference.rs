mod common;

use common::gaussian_matrix;
use endiv::inference::{self, DebiasedEstimate, PipelineConfig};
use endiv::simulation::{self, DgpParams};
use endiv::Error;
use nalgebra::DMatrix;
use proptest::prelude::*;

/// Columns with unit empirical second moment, like normalised scores.
fn unit_scores(seed: u64, n: usize, cols: usize) -> DMatrix<f64> {
    let mut m = gaussian_matrix(seed, n, cols);
    for mut c in m.column_iter_mut() {
        let s = (c.norm_squared() / n as f64).sqrt();
        c /= s;
    }
    m
}

#[test]
fn singleton_critical_value_is_normal_quantile() {
    let scores = unit_scores(3, 500, 1);
    let c = inference::multiplier_bootstrap(&scores, 0.05, 4000, 17).unwrap();
    assert!((1.90..=2.02).contains(&c), "c* = {c}");
}

#[test]
fn critical_value_grows_with_target_set() {
    let scores = unit_scores(4, 300, 6);
    let mut last = 0.0;
    for k in 1..=6 {
        let sub = scores.columns(0, k).into_owned();
        let c = inference::multiplier_bootstrap(&sub, 0.05, 1000, 5).unwrap();
        assert!(c >= last, "k = {k}: {c} < {last}");
        last = c;
    }
}

#[test]
fn critical_value_falls_with_alpha() {
    let scores = unit_scores(5, 300, 3);
    let stats = inference::bootstrap_max_statistics(&scores, 1000, 9);
    let cs: Vec<f64> = [0.01, 0.05, 0.1, 0.2, 0.5]
        .iter()
        .map(|&a| inference::critical_value_from(&stats, a).unwrap())
        .collect();
    assert!(cs.windows(2).all(|w| w[0] >= w[1]), "{cs:?}");
}

#[test]
fn bootstrap_ignores_thread_count() {
    let scores = unit_scores(6, 400, 4);
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| inference::multiplier_bootstrap(&scores, 0.05, 2000, 11).unwrap())
    };
    assert_eq!(run(1).to_bits(), run(4).to_bits());
}

#[test]
fn zero_scores_are_rejected() {
    let scores = DMatrix::zeros(50, 2);
    assert!(matches!(
        inference::multiplier_bootstrap(&scores, 0.05, 500, 0),
        Err(Error::ZeroScoreVariance(_))
    ));
    assert!(inference::multiplier_bootstrap(&unit_scores(1, 50, 1), 0.05, 99, 0).is_err());
}

#[test]
fn sigma_hat_matches_direct_summation_at_truth() {
    let params = DgpParams::new(400, 12, 12, 1, 21).unwrap();
    let pop = simulation::population(&params, &[0, 1]).unwrap();
    let data = simulation::generate_with_population(&params, &pop).unwrap();
    for t in &pop.targets {
        let est = inference::estimate_coefficient(&data, t.j, &pop.beta0, &t.mu0).unwrap();
        let (mut omega, mut second) = (0.0, 0.0);
        for i in 0..data.n() {
            let zmu: f64 = (0..data.k()).map(|k| data.z()[(i, k)] * t.mu0[k]).sum();
            let fitted: f64 = (0..data.p()).map(|k| data.x()[(i, k)] * pop.beta0[k]).sum();
            omega += data.x()[(i, t.j)] * zmu;
            second += ((data.y()[i] - fitted) * zmu).powi(2);
        }
        omega /= data.n() as f64;
        second /= data.n() as f64;
        let sigma = second.sqrt() / omega.abs();
        assert!((est.omega_hat - omega).abs() < 1e-10 * omega.abs());
        assert!((est.sigma_hat - sigma).abs() < 1e-10 * sigma);
    }
}

#[test]
fn pipeline_bands_are_symmetric_with_expected_width() {
    let params = DgpParams::new(300, 12, 12, 1, 2).unwrap();
    let data = simulation::generate_dgp(&params).unwrap();
    let cfg = PipelineConfig {
        kappa_floor: Some(simulation::population_kappa(12)),
        draws: 1000,
        ..PipelineConfig::default()
    };
    let res = inference::infer(&data, &[0, 1, 2], &cfg).unwrap();
    let root_n = (data.n() as f64).sqrt();
    for (e, p) in res.band.entries.iter().zip(&res.pointwise) {
        let mid = 0.5 * (e.interval.lo + e.interval.hi);
        assert!((mid - e.beta_check).abs() < 1e-12);
        let w = 2.0 * res.band.critical_value * e.sigma_hat / root_n;
        assert!((e.interval.width() - w).abs() < 1e-12);
        assert!(p.width() <= e.interval.width() + 1e-12);
        let rel = inference::relative_moment_residual(
            &data,
            e.j,
            &res.stage1.beta_hat,
            &res.instruments.iter().find(|f| f.j == e.j).unwrap().mu_hat,
            e.beta_check,
        )
        .unwrap();
        assert!(rel <= 1e-10, "moment residual {rel}");
    }
    let again = inference::infer(&data, &[0, 1, 2], &cfg).unwrap();
    assert_eq!(res, again);
}

#[test]
fn degenerate_bands() {
    let est = DebiasedEstimate { j: 0, beta_check: 1.5, omega_hat: 1.0, sigma_hat: 0.0 };
    let band = inference::simultaneous_bands(&[est.clone()], 2.0, 100, 0.05, 100, 0).unwrap();
    assert_eq!(band.entries[0].interval.width(), 0.0);
    assert!(band.entries[0].warning.is_some());
    let est = DebiasedEstimate { sigma_hat: 1.0, ..est };
    let band = inference::simultaneous_bands(&[est], 0.0, 100, 0.05, 100, 0).unwrap();
    assert_eq!((band.entries[0].interval.lo, band.entries[0].interval.hi), (1.5, 1.5));
}

proptest! {
    #[test]
    fn pointwise_width_shrinks_in_alpha(a in 0.001f64..0.99, b in 0.001f64..0.99, sigma in 0.01f64..10.0) {
        let est = DebiasedEstimate { j: 0, beta_check: 0.3, omega_hat: 1.0, sigma_hat: sigma };
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let wl = inference::pointwise_interval(&est, 200, lo).unwrap().width();
        let wh = inference::pointwise_interval(&est, 200, hi).unwrap().width();
        prop_assert!(wl >= wh);
    }
}
