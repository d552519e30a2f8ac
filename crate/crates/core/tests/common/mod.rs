//! Shared fixtures and brute-force oracles for the integration tests.
#![allow(dead_code)]

use endiv::{Dataset, PenaltyConfig};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

pub fn gaussian_matrix(seed: u64, rows: usize, cols: usize) -> DMatrix<f64> {
    let mut r = endiv::rng::stream(seed, 0);
    DMatrix::from_fn(rows, cols, |_, _| r.sample::<f64, _>(StandardNormal))
}

/// Small IV instance: `x = z[:, ..p] + noise`, `y = x beta + e`.
pub fn random_instance(seed: u64, n: usize, p: usize, k: usize) -> Dataset {
    assert!(k >= p);
    let mut r = endiv::rng::stream(seed, 1);
    let z = DMatrix::from_fn(n, k, |_, _| r.sample::<f64, _>(StandardNormal));
    let x = DMatrix::from_fn(n, p, |i, j| z[(i, j)] + 0.5 * r.sample::<f64, _>(StandardNormal));
    let beta = DVector::from_fn(p, |j, _| if j % 2 == 0 { 1.0 - 0.3 * j as f64 } else { 0.0 });
    let e = DVector::from_fn(n, |_, _| 0.5 * r.sample::<f64, _>(StandardNormal));
    let y = &x * beta + e;
    Dataset::new(y, x, z).unwrap()
}

/// `||beta||_1 + lambda_t max_l max(rms_l, |m_l| / tau)`.
pub fn reduced_stage1(data: &Dataset, pen: &PenaltyConfig, beta: &[f64]) -> f64 {
    let n = data.n() as f64;
    let r = data.y() - data.x() * DVector::from_column_slice(beta);
    let mut worst: f64 = 0.0;
    for l in 0..data.k() {
        let zl = data.z().column(l);
        let m = zl.dot(&r) / n;
        let q = (zl.component_mul(&r).norm_squared() / n).sqrt();
        worst = worst.max(q).max(m.abs() / pen.tau);
    }
    beta.iter().map(|b| b.abs()).sum::<f64>() + pen.lambda_t * worst
}

/// Multi-resolution grid search: a `(2w+1)^p` lattice around the incumbent,
/// recentred on improvement. The lattice is randomly rotated each round so
/// ridges of the nonsmooth objective cannot trap it; the spacing halves after
/// `ROTATIONS` consecutive rounds without progress.
pub fn grid_minimize(f: impl Fn(&[f64]) -> f64, start: &[f64], h0: f64, h_min: f64) -> (f64, Vec<f64>) {
    const ROTATIONS: usize = 4;
    let p = start.len();
    let width: i64 = 2;
    let side = (2 * width + 1) as usize;
    let mut best = start.to_vec();
    let mut best_val = f(&best);
    let mut h = h0;
    let mut point = vec![0.0; p];
    let mut offsets = vec![0.0; p];
    let mut failures = 0;
    let mut round = 0u64;
    while h >= h_min {
        let rot = if round == 0 {
            DMatrix::identity(p, p)
        } else {
            gaussian_matrix(round, p, p).qr().q()
        };
        round += 1;
        let center = best.clone();
        let mut improved = false;
        for code in 0..side.pow(p as u32) {
            let mut c = code;
            for v in offsets.iter_mut() {
                *v = ((c % side) as i64 - width) as f64 * h;
                c /= side;
            }
            for (d, v) in point.iter_mut().enumerate() {
                *v = center[d] + (0..p).map(|e| rot[(d, e)] * offsets[e]).sum::<f64>();
            }
            let val = f(&point);
            if val < best_val - 1e-15 * best_val.abs() {
                best_val = val;
                best.copy_from_slice(&point);
                improved = true;
            }
        }
        if improved {
            failures = 0;
        } else {
            failures += 1;
            if failures >= ROTATIONS {
                h *= 0.5;
                failures = 0;
            }
        }
    }
    (best_val, best)
}

/// Grid search on every coordinate face: the lattice rarely lands on the
/// kinks of `|beta_k|`, so each zero pattern is searched separately.
pub fn stage1_grid_oracle(data: &Dataset, pen: &PenaltyConfig) -> (f64, Vec<f64>) {
    let p = data.p();
    let mut best = (f64::INFINITY, vec![0.0; p]);
    for mask in 1..(1usize << p) {
        let free: Vec<usize> = (0..p).filter(|k| mask >> k & 1 == 1).collect();
        let embed = |b: &[f64]| {
            let mut full = vec![0.0; p];
            free.iter().zip(b).for_each(|(&k, &v)| full[k] = v);
            full
        };
        let (val, b) = grid_minimize(|b| reduced_stage1(data, pen, &embed(b)), &vec![0.0; free.len()], 0.5, 1e-9);
        if val < best.0 {
            best = (val, embed(&b));
        }
    }
    let at_zero = reduced_stage1(data, pen, &vec![0.0; p]);
    if at_zero < best.0 {
        best = (at_zero, vec![0.0; p]);
    }
    best
}

pub fn rel_diff(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

fn worst_slack(moment: f64, q: f64, scale: f64) -> f64 {
    q.max(moment.abs() / scale)
}

/// Stage-2 objective of `(mu, theta)` with the smallest feasible slacks.
pub fn reduced_stage2(data: &Dataset, j: usize, pen: &PenaltyConfig, mu: &[f64], theta: &[f64]) -> f64 {
    let n = data.n() as f64;
    let scale = pen.c * pen.tau;
    let x_rest = data.x().clone().remove_column(j);
    let zmu = data.z() * DVector::from_column_slice(mu);
    let v = data.x().column(j) - &zmu - &x_rest * DVector::from_column_slice(theta);
    let mut worst: f64 = 0.0;
    for w in data.z().column_iter().chain(x_rest.column_iter()) {
        let m = w.dot(&v) / n;
        let q = (w.component_mul(&v).norm_squared() / n).sqrt();
        worst = worst.max(worst_slack(m, q, scale));
    }
    for w in x_rest.column_iter() {
        let m = w.dot(&zmu) / n;
        let q = (w.component_mul(&zmu).norm_squared() / n).sqrt();
        worst = worst.max(worst_slack(m, q, scale));
    }
    mu.iter().chain(theta).map(|b| b.abs()).sum::<f64>() + pen.lambda_t * worst
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}
