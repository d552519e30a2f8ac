mod common;

use common::gaussian_matrix;
use endiv::sensitivity::{self, KappaCertificate};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn dims(seed: u64) -> (usize, usize) {
    (3 + (seed % 6) as usize, 2 + (seed / 6 % 5) as usize)
}

#[test]
fn lower_bound_never_exceeds_exact() {
    for q in [1, 2] {
        for seed in 0..50u64 {
            let (k, p) = dims(seed);
            let psi = gaussian_matrix(seed, k, p);
            let s = 1 + (seed % 2) as usize;
            let grid: Vec<usize> = (s..=p.min(k)).collect();
            let lb = sensitivity::kappa_lower_bound(&psi, s, 3.0, q, &grid).unwrap();
            let (exact, _) = sensitivity::kappa_exact_small(&psi, s, 3.0, q).unwrap();
            assert!(lb <= exact + 1e-9, "q={q} seed={seed}: {lb} > {exact}");
        }
    }
}

#[test]
fn kappa_shrinks_with_larger_cone() {
    for seed in 0..10u64 {
        let psi = gaussian_matrix(100 + seed, 6, 5);
        let by_u: Vec<f64> = [0.5, 1.0, 3.0, 10.0]
            .iter()
            .map(|&u| sensitivity::kappa_exact_small(&psi, 1, u, 1).unwrap().0)
            .collect();
        assert!(by_u.windows(2).all(|w| w[0] >= w[1] - 1e-9), "{by_u:?}");
        let by_s: Vec<f64> = (1..=3)
            .map(|s| sensitivity::kappa_exact_small(&psi, s, 3.0, 1).unwrap().0)
            .collect();
        assert!(by_s.windows(2).all(|w| w[0] >= w[1] - 1e-9), "{by_s:?}");
    }
}

#[test]
fn l1_kappa_is_below_l2_kappa() {
    for seed in 0..10u64 {
        let psi = gaussian_matrix(200 + seed, 5, 4);
        let (k1, c1) = sensitivity::kappa_exact_small(&psi, 2, 3.0, 1).unwrap();
        let (k2, c2) = sensitivity::kappa_exact_small(&psi, 2, 3.0, 2).unwrap();
        assert_eq!(c1, KappaCertificate::LpCertified);
        assert_eq!(c2, KappaCertificate::UpperBoundEstimate);
        assert!(k1 <= k2 + 1e-9, "{k1} > {k2}");
    }
}

#[test]
fn sparse_singular_values() {
    let d = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![2.0, 1.0]));
    assert_eq!(sensitivity::sparse_singular_bounds(&d, 1).unwrap(), (1.0, 2.0));
    let eye = DMatrix::<f64>::identity(5, 5);
    for m in 1..=5 {
        let (lo, hi) = sensitivity::sparse_singular_bounds(&eye, m).unwrap();
        assert!((lo - 1.0).abs() < 1e-12 && (hi - 1.0).abs() < 1e-12);
    }
    for seed in 0..5u64 {
        let psi = gaussian_matrix(300 + seed, 7, 6);
        let mut last = 0.0;
        for m in 1..=6 {
            let (lo, hi) = sensitivity::sparse_singular_bounds(&psi, m).unwrap();
            assert!(hi >= lo && lo >= 0.0);
            assert!(hi >= last - 1e-12);
            last = hi;
        }
    }
}

#[test]
fn identity_bound_and_weak_iv_constant() {
    assert!((sensitivity::lower_bound_term(1.0, 1.0, 64, 1, 3.0, 1) - 1.0 / 96.0).abs() < 1e-15);
    let eye = DMatrix::<f64>::identity(64, 64);
    let lb = sensitivity::kappa_lower_bound(&eye, 1, 3.0, 1, &[64]).unwrap();
    assert!((lb - 1.0 / 96.0).abs() < 1e-12);
    let weak = sensitivity::weak_iv_bound(1.0, 1, 1).unwrap();
    assert!((weak - 1.0 / 128.0).abs() < 1e-15);
    assert!(weak <= lb);
    let half = sensitivity::weak_iv_bound(0.5, 1, 1).unwrap();
    assert!((weak / half - 4.0).abs() < 1e-12);
    assert!(sensitivity::weak_iv_bound(0.0, 1, 1).is_err());
    assert!(sensitivity::kappa_lower_bound(&eye, 1, 3.0, 1, &[]).is_err());
}

#[test]
fn identity_exact_and_bound_agree_in_order() {
    for p in [2, 4, 8] {
        let eye = DMatrix::<f64>::identity(p, p);
        let (k, _) = sensitivity::kappa_exact_small(&eye, 1, 3.0, 1).unwrap();
        assert!((k - 1.0 / p.min(4) as f64).abs() < 1e-9, "p={p}: {k}");
        let lb = sensitivity::kappa_lower_bound(&eye, 1, 3.0, 1, &(1..=p).collect::<Vec<_>>()).unwrap();
        assert!(lb >= 0.0 && lb <= k + 1e-9);
    }
}

#[test]
fn budget_is_enforced() {
    let psi = gaussian_matrix(1, 13, 13);
    assert!(sensitivity::kappa_exact_small(&psi, 1, 3.0, 1).is_err());
    assert!(sensitivity::kappa_exact_small(&gaussian_matrix(1, 5, 5), 4, 3.0, 1).is_err());
}

#[test]
fn random_design_keeps_identity_sensitivity() {
    let (n, p) = (2000, 10);
    let good = (0..100u64)
        .filter(|&seed| {
            let z = gaussian_matrix(1000 + seed, n, p);
            let psi = z.tr_mul(&z) / n as f64;
            // population value 1/4; require at least half of it
            sensitivity::kappa_exact_small(&psi, 1, 3.0, 1).unwrap().0 >= 0.125
        })
        .count();
    assert!(good >= 95, "{good} of 100");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn kappa_and_bound_are_homogeneous(seed in 0u64..1000, gamma in 0.1f64..10.0) {
        let psi = gaussian_matrix(seed, 5, 4);
        let (k, _) = sensitivity::kappa_exact_small(&psi, 1, 3.0, 1).unwrap();
        let (kg, _) = sensitivity::kappa_exact_small(&(&psi * gamma), 1, 3.0, 1).unwrap();
        prop_assert!((kg - gamma * k).abs() <= 1e-8 * kg.max(1.0));
        let lb = sensitivity::kappa_lower_bound(&psi, 1, 3.0, 1, &[1, 2, 3, 4]).unwrap();
        let lbg = sensitivity::kappa_lower_bound(&(&psi * gamma), 1, 3.0, 1, &[1, 2, 3, 4]).unwrap();
        prop_assert!((lbg - gamma * lb).abs() <= 1e-10 * lbg.max(1.0));
    }

    #[test]
    fn rank_deficient_bound_is_zero(seed in 0u64..1000) {
        let mut psi = gaussian_matrix(seed, 4, 4);
        psi.column_mut(3).fill(0.0);
        psi.column_mut(2).fill(0.0);
        prop_assert_eq!(sensitivity::kappa_lower_bound(&psi, 1, 3.0, 1, &[4]).unwrap(), 0.0);
    }
}
