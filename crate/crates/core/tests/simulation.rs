use endiv::inference::PipelineConfig;
use endiv::simulation::{self, DgpParams, ReplicationRecord, SimulationConfig};
use endiv::Error;

fn config(p: usize, draws: usize) -> SimulationConfig {
    SimulationConfig::calibrated(p, PipelineConfig { draws, ..PipelineConfig::default() })
}

fn mean_sd(v: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = v.clone().count() as f64;
    let m = v.clone().sum::<f64>() / n;
    let var = v.map(|a| (a - m) * (a - m)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

#[test]
fn large_sample_moments() {
    let params = DgpParams::new(100_000, 10, 20, 2, 8).unwrap();
    let data = simulation::generate_dgp(&params).unwrap();
    let truth = data.truth().unwrap();
    let n = data.n() as f64;
    let xi = &truth.xi;
    for k in 0..data.k() {
        let (m, sd) = mean_sd(data.z().column(k).iter().zip(xi).map(|(a, b)| a * b));
        assert!(m.abs() <= 4.0 * sd / n.sqrt(), "instrument {k}: {m}");
    }
    // E[z x'] has a unit entry where x_j loads on z_k
    let psi = data.psi();
    for k in 0..data.k() {
        for j in 0..data.p() {
            let target = if k / params.l == j { 1.0 } else { 0.0 };
            let (m, sd) = mean_sd(data.z().column(k).iter().zip(data.x().column(j).iter()).map(|(a, b)| a * b));
            assert!((psi[(k, j)] - m).abs() < 1e-12);
            assert!((m - target).abs() <= 4.0 * sd / n.sqrt(), "Psi[{k},{j}] = {m}");
        }
    }
    let fitted = data.x() * nalgebra::DVector::from_vec(truth.beta0.clone());
    for i in 0..data.n() {
        assert!((data.y()[i] - fitted[i] - xi[i]).abs() < 1e-12);
    }
}

#[test]
fn regressor_is_endogenous() {
    let data = simulation::generate_dgp(&DgpParams::new(100_000, 10, 10, 1, 3).unwrap()).unwrap();
    let xi = &data.truth().unwrap().xi;
    let n = data.n() as f64;
    let (mx, sx) = mean_sd(data.x().column(0).iter().copied());
    let (me, se) = mean_sd(xi.iter().copied());
    let cov = data.x().column(0).iter().zip(xi).map(|(a, b)| (a - mx) * (b - me)).sum::<f64>() / (n - 1.0);
    let corr = cov / (sx * se);
    // population value about 0.056
    assert!(corr >= 0.05, "corr {corr}");
}

#[test]
fn noise_free_design_is_recovered() {
    let params = DgpParams { noise_free: true, ..DgpParams::new(500, 30, 30, 1, 4).unwrap() };
    let rec = simulation::run_replication(&params, &config(30, 500)).unwrap();
    assert!(rec.covered);
    assert!(rec.errors.iter().all(|e| e.abs() < 1e-6), "{:?}", rec.errors);
}

#[test]
fn single_replication_smoke_and_replay() {
    let params = DgpParams::new(500, 30, 30, 1, 99).unwrap();
    let cfg = config(30, 1000);
    let rec = simulation::run_replication(&params, &cfg).unwrap();
    assert_eq!(rec.errors.len(), 3);
    assert_eq!(rec.sigma_hat.len(), 3);
    assert!(rec.max_width > 0.0 && rec.critical_value > 0.0);
    assert!(rec.moment_residual <= 1e-10, "{}", rec.moment_residual);
    assert_eq!(rec, simulation::run_replication(&params, &cfg).unwrap());
}

#[test]
fn monte_carlo_ignores_thread_count() {
    let params = DgpParams::new(200, 12, 12, 1, 0).unwrap();
    let cfg = config(12, 300);
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| simulation::monte_carlo(&params, 6, 42, &cfg).unwrap())
    };
    let a = run(1);
    let b = run(3);
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    assert!((0.0..=1.0).contains(&a.rp05) && a.linf_width >= 0.0 && a.reps == 6);
    assert!(a.max_moment_residual <= 1e-10);
}

#[test]
fn failures_abort_aggregation() {
    let params = DgpParams::new(200, 12, 12, 1, 0).unwrap();
    let cfg = config(12, 300);
    let ok = ReplicationRecord {
        seed: 0,
        covered: true,
        pointwise_covered: vec![true; 3],
        max_width: 0.1,
        errors: vec![0.0; 3],
        critical_value: 2.0,
        sigma_hat: vec![1.0; 3],
        moment_residual: 0.0,
    };
    let mut outcomes: Vec<endiv::Result<ReplicationRecord>> = (0..19).map(|_| Ok(ok.clone())).collect();
    outcomes.push(Err(Error::Parameter("x".into())));
    assert!(simulation::summarize(&params, &cfg, &outcomes).is_ok());
    outcomes.push(Err(Error::Parameter("y".into())));
    assert!(matches!(
        simulation::summarize(&params, &cfg, &outcomes),
        Err(Error::TooManyFailures { .. })
    ));
    assert!(simulation::monte_carlo(&params, 0, 0, &cfg).is_err());
}

#[test]
fn oracle_pointwise_coverage() {
    let params = DgpParams::new(500, 30, 30, 1, 0).unwrap();
    let pop = simulation::population(&params, &[0, 1, 2]).unwrap();
    let reps = 1000u64;
    let mut hits = [0usize; 3];
    for r in 0..reps {
        let rec = simulation::oracle_replication(&params.with_seed(endiv::rng::derive_seed(7, r)), &pop, 0.05).unwrap();
        for (h, c) in hits.iter_mut().zip(&rec.covered) {
            *h += *c as usize;
        }
    }
    for h in hits {
        let cov = h as f64 / reps as f64;
        assert!((0.93..=0.97).contains(&cov), "coverage {cov}");
    }
}
